//! Typed tensor payloads, nested step structures, and signatures.
//!
//! A stream of steps is flattened depth-first into columns; the signature
//! records the (path, dtype, shape) of each column and must stay identical
//! across every step in a stream. Raw tensor bytes are row-major and
//! little-endian everywhere (wire, checkpoints).

use crate::binio::{BufWrite, DecodeError, Reader};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("data length {actual} does not match dtype/shape (expected {expected})")]
    DataLength { expected: usize, actual: usize },
    #[error("invalid field name {0:?}: must be non-empty and must not contain '/'")]
    InvalidName(String),
    #[error("duplicate column path {0:?}")]
    DuplicatePath(String),
    #[error("signature columns are not in depth-first order near {0:?}")]
    ColumnOrder(String),
    #[error("value for column {path:?} does not match signature: {detail}")]
    ValueMismatch { path: String, detail: String },
    #[error("value count {actual} does not match signature column count {expected}")]
    ValueCount { expected: usize, actual: usize },
}

/// Reported by [`check_signature`] with the first offending column.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum SignatureMismatch {
    #[error("column {path:?}: expected {expected}, got {actual}")]
    Column {
        path: String,
        expected: String,
        actual: String,
    },
    #[error("column count mismatch: expected {expected}, got {actual}")]
    Count { expected: usize, actual: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Dtype {
    Float32,
    Float64,
    Int8,
    Int16,
    Int32,
    Int64,
    Uint8,
    Uint16,
    Uint32,
    Uint64,
    Bool,
}

impl Dtype {
    pub fn byte_width(self) -> usize {
        match self {
            Dtype::Float32 => 4,
            Dtype::Float64 => 8,
            Dtype::Int8 => 1,
            Dtype::Int16 => 2,
            Dtype::Int32 => 4,
            Dtype::Int64 => 8,
            Dtype::Uint8 => 1,
            Dtype::Uint16 => 2,
            Dtype::Uint32 => 4,
            Dtype::Uint64 => 8,
            Dtype::Bool => 1,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Dtype::Float32 => 0,
            Dtype::Float64 => 1,
            Dtype::Int8 => 2,
            Dtype::Int16 => 3,
            Dtype::Int32 => 4,
            Dtype::Int64 => 5,
            Dtype::Uint8 => 6,
            Dtype::Uint16 => 7,
            Dtype::Uint32 => 8,
            Dtype::Uint64 => 9,
            Dtype::Bool => 10,
        }
    }

    pub fn from_code(code: u8) -> Option<Dtype> {
        Some(match code {
            0 => Dtype::Float32,
            1 => Dtype::Float64,
            2 => Dtype::Int8,
            3 => Dtype::Int16,
            4 => Dtype::Int32,
            5 => Dtype::Int64,
            6 => Dtype::Uint8,
            7 => Dtype::Uint16,
            8 => Dtype::Uint32,
            9 => Dtype::Uint64,
            10 => Dtype::Bool,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Dtype::Float32 => "float32",
            Dtype::Float64 => "float64",
            Dtype::Int8 => "int8",
            Dtype::Int16 => "int16",
            Dtype::Int32 => "int32",
            Dtype::Int64 => "int64",
            Dtype::Uint8 => "uint8",
            Dtype::Uint16 => "uint16",
            Dtype::Uint32 => "uint32",
            Dtype::Uint64 => "uint64",
            Dtype::Bool => "bool",
        }
    }
}

/// A dense tensor: dtype, shape, and row-major little-endian bytes.
/// Scalars are rank 0 (empty shape).
#[derive(Clone, PartialEq)]
pub struct TensorValue {
    dtype: Dtype,
    shape: Vec<usize>,
    data: Vec<u8>,
}

impl std::fmt::Debug for TensorValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "TensorValue({}{:?}, {} bytes)",
            self.dtype.name(),
            self.shape,
            self.data.len()
        )
    }
}

impl TensorValue {
    pub fn new(dtype: Dtype, shape: Vec<usize>, data: Vec<u8>) -> Result<Self, TensorError> {
        let expected = dtype.byte_width() * shape.iter().product::<usize>();
        if data.len() != expected {
            return Err(TensorError::DataLength {
                expected,
                actual: data.len(),
            });
        }
        Ok(TensorValue { dtype, shape, data })
    }

    pub fn from_f32s(shape: Vec<usize>, values: &[f32]) -> Self {
        let mut data = Vec::with_capacity(values.len() * 4);
        for v in values {
            data.extend_from_slice(&v.to_le_bytes());
        }
        TensorValue::new(Dtype::Float32, shape, data).expect("shape/value count mismatch")
    }

    pub fn scalar_f32(v: f32) -> Self {
        TensorValue::from_f32s(vec![], &[v])
    }

    pub fn scalar_i64(v: i64) -> Self {
        TensorValue::new(Dtype::Int64, vec![], v.to_le_bytes().to_vec()).unwrap()
    }

    pub fn to_f32s(&self) -> Vec<f32> {
        assert_eq!(self.dtype, Dtype::Float32);
        self.data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect()
    }

    pub fn dtype(&self) -> Dtype {
        self.dtype
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn byte_len(&self) -> usize {
        self.data.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum StepValue {
    Tensor(TensorValue),
    Nested(StepStructure),
}

/// An ordered tree of named fields whose leaves are tensors. One step is
/// one data element appended by a writer.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StepStructure {
    fields: Vec<(String, StepValue)>,
}

fn valid_name(name: &str) -> bool {
    !name.is_empty() && !name.contains('/')
}

impl StepStructure {
    pub fn new() -> Self {
        StepStructure::default()
    }

    /// Panics on an empty name or a name containing '/'.
    pub fn push_tensor(&mut self, name: &str, value: TensorValue) -> &mut Self {
        assert!(valid_name(name), "invalid field name {name:?}");
        self.fields.push((name.to_string(), StepValue::Tensor(value)));
        self
    }

    pub fn push_nested(&mut self, name: &str, value: StepStructure) -> &mut Self {
        assert!(valid_name(name), "invalid field name {name:?}");
        self.fields.push((name.to_string(), StepValue::Nested(value)));
        self
    }

    pub fn single(name: &str, value: TensorValue) -> Self {
        let mut s = StepStructure::new();
        s.push_tensor(name, value);
        s
    }

    pub fn fields(&self) -> &[(String, StepValue)] {
        &self.fields
    }

    /// Leaf tensors in depth-first order, borrowed.
    pub fn leaves(&self) -> Vec<&TensorValue> {
        let mut out = Vec::new();
        self.collect_leaves(&mut out);
        out
    }

    fn collect_leaves<'a>(&'a self, out: &mut Vec<&'a TensorValue>) {
        for (_, v) in &self.fields {
            match v {
                StepValue::Tensor(t) => out.push(t),
                StepValue::Nested(n) => n.collect_leaves(out),
            }
        }
    }

    fn collect_columns(&self, prefix: &str, out: &mut Vec<ColumnSpec>) {
        for (name, v) in &self.fields {
            let path = if prefix.is_empty() {
                name.clone()
            } else {
                format!("{prefix}/{name}")
            };
            match v {
                StepValue::Tensor(t) => out.push(ColumnSpec {
                    path,
                    dtype: t.dtype(),
                    shape: t.shape().to_vec(),
                }),
                StepValue::Nested(n) => n.collect_columns(&path, out),
            }
        }
    }
}

/// One column of the flattened view: slash-joined path, dtype, static shape.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColumnSpec {
    pub path: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
}

impl ColumnSpec {
    pub fn row_bytes(&self) -> usize {
        self.dtype.byte_width() * self.shape.iter().product::<usize>()
    }

    fn describe(&self) -> String {
        format!("{}{:?}", self.dtype.name(), self.shape)
    }
}

/// The fixed per-stream schema: the ordered columns produced by depth-first
/// flattening of a step structure.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Signature {
    columns: Vec<ColumnSpec>,
}

impl Signature {
    pub fn new(columns: Vec<ColumnSpec>) -> Result<Self, TensorError> {
        let mut seen = std::collections::HashSet::new();
        for c in &columns {
            if !seen.insert(c.path.as_str()) {
                return Err(TensorError::DuplicatePath(c.path.clone()));
            }
        }
        Ok(Signature { columns })
    }

    pub fn of(step: &StepStructure) -> Signature {
        let mut columns = Vec::new();
        step.collect_columns("", &mut columns);
        // Depth-first traversal of a tree with unique sibling names cannot
        // produce duplicate paths.
        Signature { columns }
    }

    pub fn columns(&self) -> &[ColumnSpec] {
        &self.columns
    }

    pub fn num_columns(&self) -> usize {
        self.columns.len()
    }

    /// Total bytes of one row (one step) across all columns.
    pub fn row_bytes(&self) -> usize {
        self.columns.iter().map(|c| c.row_bytes()).sum()
    }

    pub fn encode(&self, out: &mut Vec<u8>) {
        out.put_u32(self.columns.len() as u32);
        for c in &self.columns {
            out.put_str16(&c.path);
            out.put_u8(c.dtype.code());
            debug_assert!(c.shape.len() <= u8::MAX as usize);
            out.put_u8(c.shape.len() as u8);
            for d in &c.shape {
                out.put_u32(*d as u32);
            }
        }
    }

    pub(crate) fn decode_from(r: &mut Reader<'_>) -> Result<Signature, DecodeError> {
        let n = r.u32("signature column count")?;
        let mut columns = Vec::new();
        for _ in 0..n {
            let path = r.str16("column path")?;
            let code = r.u8("dtype code")?;
            let dtype = Dtype::from_code(code).ok_or(DecodeError {
                pos: 0,
                what: "unknown dtype code",
            })?;
            let rank = r.u8("rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("dim")? as usize);
            }
            columns.push(ColumnSpec { path, dtype, shape });
        }
        Signature::new(columns).map_err(|_| DecodeError {
            pos: 0,
            what: "duplicate column path",
        })
    }

    pub fn decode(buf: &[u8]) -> Result<Signature, DecodeError> {
        let mut r = Reader::new(buf);
        let sig = Signature::decode_from(&mut r)?;
        r.finish("trailing bytes after signature")?;
        Ok(sig)
    }
}

/// Flattens a step depth-first into its leaf tensors plus the derived
/// signature. `unflatten(flatten(s)) == s` for every well-formed step.
pub fn flatten(step: &StepStructure) -> (Vec<TensorValue>, Signature) {
    let values = step.leaves().into_iter().cloned().collect();
    (values, Signature::of(step))
}

/// Rebuilds the nested structure described by `signature` from flat values.
pub fn unflatten(
    values: &[TensorValue],
    signature: &Signature,
) -> Result<StepStructure, TensorError> {
    if values.len() != signature.num_columns() {
        return Err(TensorError::ValueCount {
            expected: signature.num_columns(),
            actual: values.len(),
        });
    }
    for (v, c) in values.iter().zip(signature.columns()) {
        if v.dtype() != c.dtype || v.shape() != c.shape.as_slice() {
            return Err(TensorError::ValueMismatch {
                path: c.path.clone(),
                detail: format!(
                    "expected {}, got {}{:?}",
                    c.describe(),
                    v.dtype().name(),
                    v.shape()
                ),
            });
        }
    }
    let paths: Vec<Vec<&str>> = signature
        .columns()
        .iter()
        .map(|c| c.path.split('/').collect())
        .collect();
    build_tree(&paths, values, 0, &signature.columns)
}

fn build_tree(
    paths: &[Vec<&str>],
    values: &[TensorValue],
    depth: usize,
    columns: &[ColumnSpec],
) -> Result<StepStructure, TensorError> {
    let mut out = StepStructure::new();
    let mut seen: std::collections::HashSet<&str> = std::collections::HashSet::new();
    let mut i = 0;
    while i < paths.len() {
        let seg = paths[i][depth];
        if !valid_name(seg) {
            return Err(TensorError::InvalidName(seg.to_string()));
        }
        if !seen.insert(seg) {
            // Same first segment reappearing non-consecutively: the column
            // list cannot have come from a depth-first traversal.
            return Err(TensorError::ColumnOrder(columns[i].path.clone()));
        }
        // Group the consecutive run sharing this segment.
        let start = i;
        while i < paths.len() && paths[i][depth] == seg {
            i += 1;
        }
        let group = start..i;
        let is_leaf = paths[start].len() == depth + 1;
        if is_leaf {
            if group.len() != 1 {
                return Err(TensorError::DuplicatePath(columns[start].path.clone()));
            }
            out.push_tensor(seg, values[start].clone());
        } else {
            for j in group.clone() {
                if paths[j].len() == depth + 1 {
                    return Err(TensorError::ColumnOrder(columns[j].path.clone()));
                }
            }
            let nested = build_tree(
                &paths[group.clone()],
                &values[group.clone()],
                depth + 1,
                &columns[group],
            )?;
            out.push_nested(seg, nested);
        }
    }
    Ok(out)
}

/// Checks that `step` flattens to exactly `expected`, reporting the first
/// offending column on mismatch.
pub fn check_signature(
    step: &StepStructure,
    expected: &Signature,
) -> Result<(), SignatureMismatch> {
    let actual = Signature::of(step);
    let n = expected.num_columns().min(actual.num_columns());
    for i in 0..n {
        let e = &expected.columns()[i];
        let a = &actual.columns()[i];
        if e != a {
            return Err(SignatureMismatch::Column {
                path: a.path.clone(),
                expected: format!("{:?}={}", e.path, e.describe()),
                actual: format!("{:?}={}", a.path, a.describe()),
            });
        }
    }
    if expected.num_columns() != actual.num_columns() {
        return Err(SignatureMismatch::Count {
            expected: expected.num_columns(),
            actual: actual.num_columns(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nested_step() -> StepStructure {
        // {ts: {obs, reward}, action}
        let mut ts = StepStructure::new();
        ts.push_tensor("obs", TensorValue::from_f32s(vec![2], &[1.0, 2.0]));
        ts.push_tensor("reward", TensorValue::scalar_f32(0.5));
        let mut step = StepStructure::new();
        step.push_nested("ts", ts);
        step.push_tensor("action", TensorValue::scalar_i64(3));
        step
    }

    #[test]
    fn single_leaf_is_one_column() {
        let step = StepStructure::single("obs", TensorValue::from_f32s(vec![2], &[1.0, 2.0]));
        let (values, sig) = flatten(&step);
        assert_eq!(values.len(), 1);
        assert_eq!(sig.columns()[0].path, "obs");
    }

    #[test]
    fn nested_flattens_depth_first() {
        // Hand enumeration of the 3-leaf tree: ts/obs, ts/reward, action.
        let (values, sig) = flatten(&nested_step());
        let paths: Vec<&str> = sig.columns().iter().map(|c| c.path.as_str()).collect();
        assert_eq!(paths, vec!["ts/obs", "ts/reward", "action"]);
        assert_eq!(values.len(), 3);
        assert_eq!(values[2].dtype(), Dtype::Int64);
    }

    #[test]
    fn identical_structure_identical_signature() {
        assert_eq!(Signature::of(&nested_step()), Signature::of(&nested_step()));
    }

    #[test]
    fn unflatten_round_trip() {
        let step = nested_step();
        let (values, sig) = flatten(&step);
        assert_eq!(unflatten(&values, &sig).unwrap(), step);
    }

    #[test]
    fn check_signature_ok_on_own_signature() {
        let step = nested_step();
        assert!(check_signature(&step, &Signature::of(&step)).is_ok());
    }

    #[test]
    fn check_signature_shape_mismatch_names_path() {
        let step = StepStructure::single("obs", TensorValue::from_f32s(vec![2], &[1.0, 2.0]));
        let expected = Signature::new(vec![ColumnSpec {
            path: "obs".into(),
            dtype: Dtype::Float32,
            shape: vec![3],
        }])
        .unwrap();
        match check_signature(&step, &expected) {
            Err(SignatureMismatch::Column { path, .. }) => assert_eq!(path, "obs"),
            other => panic!("unexpected: {other:?}"),
        }
    }

    #[test]
    fn check_signature_extra_leaf_is_count_mismatch() {
        let step = nested_step();
        let mut bigger = step.clone();
        bigger.push_tensor("extra", TensorValue::scalar_f32(0.0));
        match check_signature(&bigger, &Signature::of(&step)) {
            Err(SignatureMismatch::Count { expected, actual }) => {
                assert_eq!((expected, actual), (3, 4));
            }
            other => panic!("unexpected: {other:?}"),
        }
    }

    #[test]
    fn tensor_length_validated() {
        assert!(TensorValue::new(Dtype::Float32, vec![2], vec![0; 7]).is_err());
        assert!(TensorValue::new(Dtype::Float32, vec![2], vec![0; 8]).is_ok());
    }

    #[test]
    fn signature_encode_decode() {
        let sig = Signature::of(&nested_step());
        let mut buf = Vec::new();
        sig.encode(&mut buf);
        assert_eq!(Signature::decode(&buf).unwrap(), sig);
    }

    #[test]
    fn signature_decode_rejects_truncation() {
        let sig = Signature::of(&nested_step());
        let mut buf = Vec::new();
        sig.encode(&mut buf);
        for cut in 0..buf.len() {
            assert!(Signature::decode(&buf[..cut]).is_err() || cut == buf.len());
        }
    }
}
