//! GGUF header and tensor-table reader (metadata only) and the mapping from
//! tensor names to a [`ModelLayout`].
//!
//! Layout of a GGUF v2/v3 file, all little-endian:
//!
//! ```text
//! magic "GGUF" | version u32 | tensor_count u64 | metadata_kv_count u64
//! metadata_kv_count x (key: string, value_type u32, value)
//! tensor_count x (name: string, n_dims u32, dims u64 x n_dims, type u32, offset u64)
//! ```
//!
//! Strings are a u64 length followed by UTF-8 bytes. Tensor payloads are never
//! read.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::File;
use std::io::{self, BufReader, Read};
use std::path::Path;

use regex::Regex;
use serde::Serialize;
use thiserror::Error;

use crate::residency::{LayoutError, ModelLayout, SubModule, SubModuleId};

pub const GGUF_MAGIC: [u8; 4] = *b"GGUF";

/// Layer-and-expert pattern for the fused `*_exps` tensors common in MoE exports.
pub const DEFAULT_EXPERT_PATTERN: &str = r"^blk\.(\d+)\.ffn_(?:gate|up|down|gate_up)_exps\.weight$";

const LAYER_PATTERN: &str = r"^blk\.(\d+)\.";

#[derive(Debug, Error)]
pub enum GgufError {
    #[error("not a GGUF file (magic {0:02x?})")]
    NotGguf([u8; 4]),
    #[error("unsupported GGUF version {0} (expected 2 or 3)")]
    UnsupportedVersion(u32),
    #[error("truncated file: {0}")]
    Truncated(String),
    #[error("unknown tensor type code {0}")]
    UnknownType(u32),
    #[error("unknown metadata value type {0}")]
    UnknownValueType(u32),
    #[error("invalid tensor {name:?}: {message}")]
    InvalidTensor { name: String, message: String },
    #[error("invalid expert pattern: {0}")]
    InvalidPattern(String),
    #[error("layout: {0}")]
    Layout(#[from] LayoutError),
    #[error("io: {0}")]
    Io(#[from] io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct GgufHeader {
    pub magic: [u8; 4],
    pub version: u32,
    pub tensor_count: u64,
    pub metadata_kv_count: u64,
}

/// (code, name, elements per block, bytes per block)
const TYPE_TABLE: &[(u32, &str, u64, u64)] = &[
    (0, "F32", 1, 4),
    (1, "F16", 1, 2),
    (2, "Q4_0", 32, 18),
    (3, "Q4_1", 32, 20),
    (6, "Q5_0", 32, 22),
    (7, "Q5_1", 32, 24),
    (8, "Q8_0", 32, 34),
    (9, "Q8_1", 32, 36),
    (10, "Q2_K", 256, 84),
    (11, "Q3_K", 256, 110),
    (12, "Q4_K", 256, 144),
    (13, "Q5_K", 256, 176),
    (14, "Q6_K", 256, 210),
    (15, "Q8_K", 256, 292),
    (16, "IQ2_XXS", 256, 66),
    (17, "IQ2_XS", 256, 74),
    (18, "IQ3_XXS", 256, 98),
    (19, "IQ1_S", 256, 50),
    (20, "IQ4_NL", 32, 18),
    (21, "IQ3_S", 256, 110),
    (22, "IQ2_S", 256, 82),
    (23, "IQ4_XS", 256, 136),
    (24, "I8", 1, 1),
    (25, "I16", 1, 2),
    (26, "I32", 1, 4),
    (27, "I64", 1, 8),
    (28, "F64", 1, 8),
    (29, "IQ1_M", 256, 56),
    (30, "BF16", 1, 2),
    (34, "TQ1_0", 256, 54),
    (35, "TQ2_0", 256, 66),
    (39, "MXFP4", 32, 17),
];

/// A known tensor element/quantization type.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(into = "String")]
pub struct GgmlType {
    code: u32,
    name: &'static str,
    block_elems: u64,
    block_bytes: u64,
}

impl From<GgmlType> for String {
    fn from(t: GgmlType) -> String {
        t.name.to_string()
    }
}

impl GgmlType {
    pub fn from_code(code: u32) -> Result<Self, GgufError> {
        TYPE_TABLE
            .iter()
            .find(|t| t.0 == code)
            .map(|&(code, name, block_elems, block_bytes)| GgmlType {
                code,
                name,
                block_elems,
                block_bytes,
            })
            .ok_or(GgufError::UnknownType(code))
    }

    pub fn from_name(name: &str) -> Option<Self> {
        TYPE_TABLE
            .iter()
            .find(|t| t.1.eq_ignore_ascii_case(name))
            .and_then(|t| Self::from_code(t.0).ok())
    }

    pub fn all() -> impl Iterator<Item = GgmlType> {
        TYPE_TABLE
            .iter()
            .map(|t| Self::from_code(t.0).expect("table entry"))
    }

    pub fn code(&self) -> u32 {
        self.code
    }

    pub fn name(&self) -> &'static str {
        self.name
    }

    pub fn block_elems(&self) -> u64 {
        self.block_elems
    }

    pub fn block_bytes(&self) -> u64 {
        self.block_bytes
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct TensorInfo {
    pub name: String,
    pub dims: Vec<u64>,
    pub ggml_type: GgmlType,
    pub offset: u64,
}

impl TensorInfo {
    pub fn n_dims(&self) -> usize {
        self.dims.len()
    }

    pub fn elements(&self) -> u64 {
        self.dims.iter().product()
    }
}

/// Storage size of a tensor: whole blocks of its type.
pub fn tensor_bytes(info: &TensorInfo) -> u64 {
    let t = &info.ggml_type;
    info.elements().div_ceil(t.block_elems) * t.block_bytes
}

/// Metadata retained for reporting; every other key is skipped.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct GgufMetadata {
    pub architecture: Option<String>,
    pub name: Option<String>,
    pub alignment: Option<u32>,
    pub expert_count: Option<u64>,
    pub block_count: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct GgufFile {
    pub header: GgufHeader,
    pub metadata: GgufMetadata,
    pub tensors: Vec<TensorInfo>,
}

impl GgufFile {
    pub fn total_tensor_bytes(&self) -> u64 {
        self.tensors.iter().map(tensor_bytes).sum()
    }
}

/// Little-endian reader that knows how many bytes remain, so a bogus length
/// fails as truncation instead of a huge allocation.
struct Cursor<R> {
    inner: R,
    pos: u64,
    len: u64,
}

impl<R: Read> Cursor<R> {
    fn new(inner: R, len: u64) -> Self {
        Cursor { inner, pos: 0, len }
    }

    fn remaining(&self) -> u64 {
        self.len.saturating_sub(self.pos)
    }

    fn need(&self, n: u64, what: &str) -> Result<(), GgufError> {
        if n > self.remaining() {
            return Err(GgufError::Truncated(format!(
                "{what} needs {n} bytes at offset {}, only {} remain",
                self.pos,
                self.remaining()
            )));
        }
        Ok(())
    }

    fn bytes<const N: usize>(&mut self, what: &str) -> Result<[u8; N], GgufError> {
        self.need(N as u64, what)?;
        let mut buf = [0u8; N];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| match e.kind() {
                io::ErrorKind::UnexpectedEof => {
                    GgufError::Truncated(format!("{what} at offset {}", self.pos))
                }
                _ => GgufError::Io(e),
            })?;
        self.pos += N as u64;
        Ok(buf)
    }

    fn u32(&mut self, what: &str) -> Result<u32, GgufError> {
        Ok(u32::from_le_bytes(self.bytes(what)?))
    }

    fn u64(&mut self, what: &str) -> Result<u64, GgufError> {
        Ok(u64::from_le_bytes(self.bytes(what)?))
    }

    fn skip(&mut self, n: u64, what: &str) -> Result<(), GgufError> {
        self.need(n, what)?;
        let copied = io::copy(&mut (&mut self.inner).take(n), &mut io::sink())?;
        if copied != n {
            return Err(GgufError::Truncated(format!(
                "{what} at offset {}",
                self.pos
            )));
        }
        self.pos += n;
        Ok(())
    }

    fn string(&mut self, what: &str) -> Result<String, GgufError> {
        let n = self.u64(what)?;
        self.need(n, what)?;
        let mut buf = vec![0u8; n as usize];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| match e.kind() {
                io::ErrorKind::UnexpectedEof => GgufError::Truncated(what.to_string()),
                _ => GgufError::Io(e),
            })?;
        self.pos += n;
        Ok(String::from_utf8_lossy(&buf).into_owned())
    }
}

fn scalar_size(value_type: u32) -> Option<u64> {
    match value_type {
        0 | 1 | 7 => Some(1),
        2 | 3 => Some(2),
        4..=6 => Some(4),
        10..=12 => Some(8),
        _ => None,
    }
}

const VT_STRING: u32 = 8;
const VT_ARRAY: u32 = 9;

enum Value {
    Int(u64),
    Str(String),
    Other,
}

fn read_value<R: Read>(c: &mut Cursor<R>, vt: u32, keep: bool) -> Result<Value, GgufError> {
    if let Some(size) = scalar_size(vt) {
        if keep && matches!(vt, 0 | 2 | 4 | 10) {
            let v = match size {
                1 => u8::from_le_bytes(c.bytes("metadata value")?) as u64,
                2 => u16::from_le_bytes(c.bytes("metadata value")?) as u64,
                4 => c.u32("metadata value")? as u64,
                _ => c.u64("metadata value")?,
            };
            return Ok(Value::Int(v));
        }
        c.skip(size, "metadata value")?;
        return Ok(Value::Other);
    }
    match vt {
        VT_STRING => {
            if keep {
                Ok(Value::Str(c.string("metadata string")?))
            } else {
                let n = c.u64("metadata string")?;
                c.skip(n, "metadata string")?;
                Ok(Value::Other)
            }
        }
        VT_ARRAY => {
            let inner = c.u32("array type")?;
            let count = c.u64("array length")?;
            if let Some(size) = scalar_size(inner) {
                let total = count
                    .checked_mul(size)
                    .ok_or_else(|| GgufError::Truncated(format!("array of {count} elements")))?;
                c.skip(total, "array payload")?;
            } else {
                for _ in 0..count {
                    read_value(c, inner, false)?;
                }
            }
            Ok(Value::Other)
        }
        other => Err(GgufError::UnknownValueType(other)),
    }
}

fn read_header<R: Read>(c: &mut Cursor<R>) -> Result<GgufHeader, GgufError> {
    let magic: [u8; 4] = c.bytes("magic")?;
    if magic != GGUF_MAGIC {
        return Err(GgufError::NotGguf(magic));
    }
    let version = c.u32("version")?;
    if !(2..=3).contains(&version) {
        return Err(GgufError::UnsupportedVersion(version));
    }
    Ok(GgufHeader {
        magic,
        version,
        tensor_count: c.u64("tensor count")?,
        metadata_kv_count: c.u64("metadata count")?,
    })
}

pub fn parse_header(bytes: &[u8]) -> Result<GgufHeader, GgufError> {
    read_header(&mut Cursor::new(bytes, bytes.len() as u64))
}

fn read_file<R: Read>(mut c: Cursor<R>) -> Result<GgufFile, GgufError> {
    let header = read_header(&mut c)?;
    let mut metadata = GgufMetadata::default();
    for _ in 0..header.metadata_kv_count {
        let key = c.string("metadata key")?;
        let vt = c.u32("metadata value type")?;
        let keep = key == "general.architecture"
            || key == "general.name"
            || key == "general.alignment"
            || key.ends_with(".expert_count")
            || key.ends_with(".block_count");
        match read_value(&mut c, vt, keep)? {
            Value::Str(s) if key == "general.architecture" => metadata.architecture = Some(s),
            Value::Str(s) if key == "general.name" => metadata.name = Some(s),
            Value::Int(v) if key == "general.alignment" => metadata.alignment = Some(v as u32),
            Value::Int(v) if key.ends_with(".expert_count") => metadata.expert_count = Some(v),
            Value::Int(v) if key.ends_with(".block_count") => metadata.block_count = Some(v),
            _ => {}
        }
    }

    let mut tensors = Vec::new();
    let mut names = HashSet::new();
    let mut last_offset = 0u64;
    for _ in 0..header.tensor_count {
        let name = c.string("tensor name")?;
        let n_dims = c.u32("tensor rank")?;
        if !(1..=4).contains(&n_dims) {
            return Err(GgufError::InvalidTensor {
                name,
                message: format!("rank {n_dims} outside 1..=4"),
            });
        }
        let mut dims = Vec::with_capacity(n_dims as usize);
        for _ in 0..n_dims {
            dims.push(c.u64("tensor dims")?);
        }
        let ggml_type = GgmlType::from_code(c.u32("tensor type")?)?;
        let offset = c.u64("tensor offset")?;
        if dims.contains(&0) {
            return Err(GgufError::InvalidTensor {
                name,
                message: "zero extent".into(),
            });
        }
        if dims
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d))
            .is_none()
        {
            return Err(GgufError::InvalidTensor {
                name,
                message: "element count overflows".into(),
            });
        }
        if offset < last_offset {
            return Err(GgufError::InvalidTensor {
                name,
                message: format!("offset {offset} precedes the previous tensor's {last_offset}"),
            });
        }
        if !names.insert(name.clone()) {
            return Err(GgufError::InvalidTensor {
                name,
                message: "duplicate name".into(),
            });
        }
        last_offset = offset;
        tensors.push(TensorInfo {
            name,
            dims,
            ggml_type,
            offset,
        });
    }
    Ok(GgufFile {
        header,
        metadata,
        tensors,
    })
}

/// Parses header, metadata and tensor table from an in-memory image.
pub fn parse_bytes(bytes: &[u8]) -> Result<GgufFile, GgufError> {
    read_file(Cursor::new(bytes, bytes.len() as u64))
}

/// Streams the header and tensor table from disk; payloads are not touched.
pub fn read_path(path: impl AsRef<Path>) -> Result<GgufFile, GgufError> {
    let f = File::open(path)?;
    let len = f.metadata()?.len();
    read_file(Cursor::new(BufReader::new(f), len))
}

/// Maps tensor names to experts.
///
/// Group 1 of `pattern` captures the layer index. If group 2 is present and
/// participates in a match it captures the expert index; otherwise the tensor
/// is a fused stack of experts along its last dimension and its bytes are
/// split evenly between them.
#[derive(Clone, Debug)]
pub struct ExpertClassifier {
    pattern: Regex,
    /// Non-expert tensors become mandatory-resident when set; otherwise they
    /// are slot-managed shared sub-modules.
    pub shared_default: bool,
}

impl ExpertClassifier {
    pub fn new(pattern: &str) -> Result<Self, GgufError> {
        let pattern = Regex::new(pattern).map_err(|e| GgufError::InvalidPattern(e.to_string()))?;
        if pattern.captures_len() < 2 {
            return Err(GgufError::InvalidPattern(
                "pattern needs a capture group for the layer index".into(),
            ));
        }
        Ok(ExpertClassifier {
            pattern,
            shared_default: true,
        })
    }

    pub fn pattern(&self) -> &str {
        self.pattern.as_str()
    }

    /// `Some((layer, Some(expert)))` for a per-expert tensor,
    /// `Some((layer, None))` for a fused one.
    fn classify(&self, name: &str) -> Result<Option<(u32, Option<u32>)>, GgufError> {
        let Some(caps) = self.pattern.captures(name) else {
            return Ok(None);
        };
        let num = |i: usize| -> Result<Option<u32>, GgufError> {
            caps.get(i)
                .map(|m| {
                    m.as_str().parse::<u32>().map_err(|_| {
                        GgufError::InvalidPattern(format!(
                            "group {i} matched non-numeric {:?} in {name:?}",
                            m.as_str()
                        ))
                    })
                })
                .transpose()
        };
        let layer = num(1)?.ok_or_else(|| {
            GgufError::InvalidPattern(format!("layer group did not participate in {name:?}"))
        })?;
        Ok(Some((layer, num(2)?)))
    }
}

impl Default for ExpertClassifier {
    fn default() -> Self {
        Self::new(DEFAULT_EXPERT_PATTERN).expect("default pattern compiles")
    }
}

/// Groups tensors into expert and shared sub-modules.
///
/// Expert ids are `rank(layer) * E + expert` where `E` is the largest expert
/// count of any layer. Non-expert tensors are merged per `blk.N.` layer;
/// tensors outside any block form one global shared sub-module placed after
/// the last layer. Shared ids follow the expert ids.
pub fn build_layout(
    tensors: &[TensorInfo],
    classifier: &ExpertClassifier,
) -> Result<ModelLayout, GgufError> {
    let layer_re = Regex::new(LAYER_PATTERN).expect("layer pattern compiles");
    let mut experts: BTreeMap<(u32, u32), u64> = BTreeMap::new();
    let mut shared: BTreeMap<u32, u64> = BTreeMap::new();
    let mut global = 0u64;
    let mut max_layer: Option<u32> = None;

    for t in tensors {
        let bytes = tensor_bytes(t);
        match classifier.classify(&t.name)? {
            Some((layer, Some(e))) => *experts.entry((layer, e)).or_default() += bytes,
            Some((layer, None)) => {
                let n = *t.dims.last().expect("rank >= 1");
                let (base, rem) = (bytes / n, bytes % n);
                for e in 0..n {
                    let share = base + u64::from(e < rem);
                    *experts.entry((layer, e as u32)).or_default() += share;
                }
            }
            None => match layer_re
                .captures(&t.name)
                .and_then(|c| c[1].parse::<u32>().ok())
            {
                Some(layer) => {
                    *shared.entry(layer).or_default() += bytes;
                    max_layer = Some(max_layer.map_or(layer, |m| m.max(layer)));
                }
                None => global += bytes,
            },
        }
    }

    experts.retain(|_, b| *b > 0);
    if experts.is_empty() && !tensors.is_empty() {
        log::warn!(
            "expert pattern {:?} matched no tensor; layout has only shared sub-modules",
            classifier.pattern()
        );
    }
    let expert_layers: BTreeSet<u32> = experts.keys().map(|k| k.0).collect();
    let per_layer = experts.keys().map(|k| k.1 + 1).max().unwrap_or(0);
    let rank: BTreeMap<u32, u32> = expert_layers
        .iter()
        .enumerate()
        .map(|(i, &l)| (l, i as u32))
        .collect();
    if let Some(&l) = expert_layers.last() {
        max_layer = Some(max_layer.map_or(l, |m| m.max(l)));
    }

    let mut sms = Vec::new();
    for (&(layer, e), &bytes) in &experts {
        sms.push(SubModule::expert(
            rank[&layer] * per_layer + e,
            bytes,
            layer,
            e,
        ));
    }
    let mut next = expert_layers.len() as u32 * per_layer;
    let mut shared_ids = Vec::new();
    for (&layer, &bytes) in &shared {
        if bytes == 0 {
            continue;
        }
        sms.push(SubModule::shared(next, bytes, layer));
        shared_ids.push(SubModuleId(next));
        next += 1;
    }
    if global > 0 {
        let layer = max_layer.map_or(0, |m| m + 1);
        sms.push(SubModule::shared(next, global, layer));
        shared_ids.push(SubModuleId(next));
    }
    let mandatory = if classifier.shared_default {
        shared_ids
    } else {
        Vec::new()
    };
    Ok(ModelLayout::new(sms, mandatory)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::residency::SubModuleKind;

    fn t(name: &str, dims: &[u64], ty: &str) -> TensorInfo {
        TensorInfo {
            name: name.into(),
            dims: dims.to_vec(),
            ggml_type: GgmlType::from_name(ty).unwrap(),
            offset: 0,
        }
    }

    fn minimal(version: u32, tensors: u64) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(b"GGUF");
        b.extend_from_slice(&version.to_le_bytes());
        b.extend_from_slice(&tensors.to_le_bytes());
        b.extend_from_slice(&0u64.to_le_bytes());
        b
    }

    #[test]
    fn tensor_bytes_examples() {
        assert_eq!(tensor_bytes(&t("x", &[4, 4], "F32")), 64);
        for ty in GgmlType::all() {
            let info = TensorInfo {
                name: "x".into(),
                dims: vec![1],
                ggml_type: ty,
                offset: 0,
            };
            assert_eq!(tensor_bytes(&info), ty.block_bytes(), "{}", ty.name());
        }
        assert_eq!(tensor_bytes(&t("x", &[512, 2], "Q4_K")), 4 * 144);
        assert_eq!(tensor_bytes(&t("x", &[33], "Q8_0")), 2 * 34);
    }

    #[test]
    fn header_errors() {
        let good = minimal(3, 0);
        assert_eq!(parse_header(&good).unwrap().version, 3);
        let mut bad = good.clone();
        bad[0] ^= 0xff;
        assert!(matches!(parse_header(&bad), Err(GgufError::NotGguf(_))));
        assert!(matches!(
            parse_header(&good[..3]),
            Err(GgufError::Truncated(_))
        ));
        assert!(matches!(
            parse_header(&minimal(1, 0)),
            Err(GgufError::UnsupportedVersion(1))
        ));
        assert!(parse_bytes(&good).unwrap().tensors.is_empty());
    }

    #[test]
    fn declared_tensors_missing_is_truncation() {
        assert!(matches!(
            parse_bytes(&minimal(3, 5)),
            Err(GgufError::Truncated(_))
        ));
    }

    #[test]
    fn huge_string_length_is_truncation() {
        let mut b = minimal(3, 1);
        b.extend_from_slice(&u64::MAX.to_le_bytes());
        assert!(matches!(parse_bytes(&b), Err(GgufError::Truncated(_))));
    }

    #[test]
    fn build_layout_per_expert_and_shared() {
        let mut ts = Vec::new();
        for layer in 0..2 {
            for e in 0..4 {
                ts.push(t(&format!("blk.{layer}.ffn_up.{e}.weight"), &[8, 8], "F16"));
            }
        }
        ts.push(t("blk.0.attn_q.weight", &[8, 8], "F32"));
        ts.push(t("blk.1.attn_q.weight", &[8, 8], "F32"));
        let c = ExpertClassifier::new(r"^blk\.(\d+)\.ffn_up\.(\d+)\.weight$").unwrap();
        let l = build_layout(&ts, &c).unwrap();
        let experts = l
            .submodules()
            .iter()
            .filter(|s| s.kind == SubModuleKind::Expert)
            .count();
        assert_eq!(experts, 8);
        assert_eq!(l.mandatory_resident().len(), 2);
        assert_eq!(l.total_bytes(), ts.iter().map(tensor_bytes).sum::<u64>());
        assert_eq!(l.get(SubModuleId(5)).unwrap().layer_index, 1);
        assert_eq!(l.get(SubModuleId(5)).unwrap().expert_index, Some(1));
    }

    #[test]
    fn fused_tensors_split_over_last_dim() {
        let ts = vec![
            t("blk.0.ffn_gate_exps.weight", &[3, 1, 4], "F32"),
            t("blk.0.ffn_down_exps.weight", &[3, 1, 4], "F32"),
            t("token_embd.weight", &[10], "F32"),
        ];
        let l = build_layout(&ts, &ExpertClassifier::default()).unwrap();
        for e in 0..4 {
            assert_eq!(l.get(SubModuleId(e)).unwrap().size_bytes, 24);
        }
        let global = l.get(SubModuleId(4)).unwrap();
        assert_eq!(global.kind, SubModuleKind::Shared);
        assert_eq!(global.layer_index, 1);
        assert_eq!(l.total_bytes(), 136);
    }

    #[test]
    fn no_expert_match_gives_all_shared() {
        let ts = vec![
            t("blk.0.attn.weight", &[4], "F32"),
            t("output.weight", &[4], "F32"),
        ];
        let l = build_layout(&ts, &ExpertClassifier::default()).unwrap();
        assert_eq!(l.mandatory_resident().len(), l.submodules().len());
        assert_eq!(l.total_bytes(), 32);
    }

    #[test]
    fn uneven_fused_split_conserves_bytes() {
        // 7 Q8_0 blocks spread over 3 experts
        let ts = [t("blk.2.ffn_up_exps.weight", &[32, 7, 3], "Q8_0")];
        let l = build_layout(&ts, &ExpertClassifier::default()).unwrap();
        assert_eq!(l.total_bytes(), tensor_bytes(&ts[0]));
        assert_eq!(l.submodules().len(), 3);
    }

    #[test]
    fn invalid_patterns() {
        assert!(ExpertClassifier::new("(").is_err());
        assert!(ExpertClassifier::new("no_groups").is_err());
        let c = ExpertClassifier::new(r"^blk\.(\w+)\.x$").unwrap();
        assert!(build_layout(&[t("blk.a.x", &[1], "F32")], &c).is_err());
    }
}
