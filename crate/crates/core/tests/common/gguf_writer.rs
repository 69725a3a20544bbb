//! Minimal GGUF writer used only to produce test fixtures. It keeps its own
//! copy of the per-type block sizes so the parser is checked against an
//! independent table.

#![allow(dead_code)]

pub const ALIGNMENT: u64 = 32;

/// (code, elements per block, bytes per block)
pub const WRITER_TYPES: &[(u32, u64, u64)] = &[
    (0, 1, 4),
    (1, 1, 2),
    (2, 32, 18),
    (3, 32, 20),
    (6, 32, 22),
    (7, 32, 24),
    (8, 32, 34),
    (9, 32, 36),
    (10, 256, 84),
    (11, 256, 110),
    (12, 256, 144),
    (13, 256, 176),
    (14, 256, 210),
    (15, 256, 292),
    (16, 256, 66),
    (17, 256, 74),
    (18, 256, 98),
    (19, 256, 50),
    (20, 32, 18),
    (21, 256, 110),
    (22, 256, 82),
    (23, 256, 136),
    (24, 1, 1),
    (25, 1, 2),
    (26, 1, 4),
    (27, 1, 8),
    (28, 1, 8),
    (29, 256, 56),
    (30, 1, 2),
    (34, 256, 54),
    (35, 256, 66),
    (39, 32, 17),
];

#[derive(Clone, Debug)]
pub enum Meta {
    U8(u8),
    U32(u32),
    I32(i32),
    U64(u64),
    F32(f32),
    Bool(bool),
    Str(String),
    ArrU32(Vec<u32>),
    ArrStr(Vec<String>),
}

#[derive(Clone, Debug)]
pub struct SpecTensor {
    pub name: String,
    pub dims: Vec<u64>,
    pub type_code: u32,
}

#[derive(Clone, Debug)]
pub struct Spec {
    pub version: u32,
    pub metadata: Vec<(String, Meta)>,
    pub tensors: Vec<SpecTensor>,
}

pub fn payload_len(type_code: u32, dims: &[u64]) -> u64 {
    let &(_, block, bytes) = WRITER_TYPES
        .iter()
        .find(|t| t.0 == type_code)
        .expect("writer knows the type");
    let elems: u64 = dims.iter().product();
    elems.div_ceil(block) * bytes
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u64).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_meta(out: &mut Vec<u8>, v: &Meta) {
    let (code, body): (u32, Vec<u8>) = match v {
        Meta::U8(x) => (0, vec![*x]),
        Meta::U32(x) => (4, x.to_le_bytes().to_vec()),
        Meta::I32(x) => (5, x.to_le_bytes().to_vec()),
        Meta::F32(x) => (6, x.to_le_bytes().to_vec()),
        Meta::Bool(x) => (7, vec![u8::from(*x)]),
        Meta::U64(x) => (10, x.to_le_bytes().to_vec()),
        Meta::Str(s) => {
            let mut b = Vec::new();
            put_str(&mut b, s);
            (8, b)
        }
        Meta::ArrU32(xs) => {
            let mut b = 4u32.to_le_bytes().to_vec();
            b.extend_from_slice(&(xs.len() as u64).to_le_bytes());
            for x in xs {
                b.extend_from_slice(&x.to_le_bytes());
            }
            (9, b)
        }
        Meta::ArrStr(xs) => {
            let mut b = 8u32.to_le_bytes().to_vec();
            b.extend_from_slice(&(xs.len() as u64).to_le_bytes());
            for x in xs {
                put_str(&mut b, x);
            }
            (9, b)
        }
    };
    out.extend_from_slice(&code.to_le_bytes());
    out.extend_from_slice(&body);
}

/// Header, metadata and tensor table, without padding or payloads.
pub fn write_table(spec: &Spec) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(b"GGUF");
    out.extend_from_slice(&spec.version.to_le_bytes());
    out.extend_from_slice(&(spec.tensors.len() as u64).to_le_bytes());
    out.extend_from_slice(&(spec.metadata.len() as u64).to_le_bytes());
    for (k, v) in &spec.metadata {
        put_str(&mut out, k);
        put_meta(&mut out, v);
    }
    let mut offset = 0u64;
    for t in &spec.tensors {
        put_str(&mut out, &t.name);
        out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
        for d in &t.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.extend_from_slice(&t.type_code.to_le_bytes());
        out.extend_from_slice(&offset.to_le_bytes());
        offset += payload_len(t.type_code, &t.dims).next_multiple_of(ALIGNMENT);
    }
    out
}

/// Serializes `spec`, including zero-filled, aligned tensor payloads.
pub fn write(spec: &Spec) -> Vec<u8> {
    let mut out = write_table(spec);
    let pad = (out.len() as u64).next_multiple_of(ALIGNMENT) - out.len() as u64;
    out.resize(out.len() + pad as usize, 0);
    for t in &spec.tensors {
        let n = payload_len(t.type_code, &t.dims).next_multiple_of(ALIGNMENT);
        out.resize(out.len() + n as usize, 0);
    }
    out
}
