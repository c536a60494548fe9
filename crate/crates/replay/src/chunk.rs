//! Chunks: K sequential steps batched column-wise and compressed.

use crate::binio::{BufWrite, DecodeError, Reader};
use crate::tensor::{check_signature, unflatten, Signature, StepStructure, TensorValue};
use thiserror::Error;

/// Globally unique per server process; never reused.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ChunkKey(pub u64);

impl std::fmt::Display for ChunkKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "chunk:{}", self.0)
    }
}

/// Lossless block codec applied per column. The codec id travels with the
/// chunk so checkpoints stay portable across server configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Codec {
    Raw,
    Lz4,
}

impl Codec {
    pub fn id(self) -> u8 {
        match self {
            Codec::Raw => 0,
            Codec::Lz4 => 1,
        }
    }

    pub fn from_id(id: u8) -> Option<Codec> {
        match id {
            0 => Some(Codec::Raw),
            1 => Some(Codec::Lz4),
            _ => None,
        }
    }

    fn compress(self, raw: &[u8]) -> Vec<u8> {
        match self {
            Codec::Raw => raw.to_vec(),
            Codec::Lz4 => lz4_flex::block::compress(raw),
        }
    }

    fn decompress(self, block: &[u8], expected_len: usize) -> Result<Vec<u8>, ChunkError> {
        match self {
            Codec::Raw => {
                if block.len() != expected_len {
                    return Err(ChunkError::Corrupt("raw column length mismatch"));
                }
                Ok(block.to_vec())
            }
            Codec::Lz4 => {
                let out = lz4_flex::block::decompress(block, expected_len)
                    .map_err(|_| ChunkError::Corrupt("lz4 stream"))?;
                if out.len() != expected_len {
                    return Err(ChunkError::Corrupt("decompressed column length mismatch"));
                }
                Ok(out)
            }
        }
    }
}

impl Default for Codec {
    fn default() -> Self {
        Codec::Lz4
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ChunkError {
    #[error("no steps provided")]
    Empty,
    #[error("step {index} does not match chunk signature: {mismatch}")]
    SignatureMismatch {
        index: usize,
        mismatch: crate::tensor::SignatureMismatch,
    },
    #[error("corrupt chunk: {0}")]
    Corrupt(&'static str),
    #[error("row range {offset}+{len} out of bounds for {num_rows} rows")]
    RowRange {
        offset: usize,
        len: usize,
        num_rows: usize,
    },
}

/// A compressed columnar batch of `num_rows` sequential steps.
#[derive(Debug, Clone, PartialEq)]
pub struct Chunk {
    key: ChunkKey,
    signature: Signature,
    num_rows: u32,
    codec: Codec,
    columns: Vec<Vec<u8>>,
    uncompressed_bytes: u64,
    compressed_bytes: u64,
}

impl Chunk {
    /// Concatenates rows column-wise in step order, then compresses each
    /// column with `codec`. Every step must match `signature`.
    pub fn build(
        key: ChunkKey,
        steps: &[StepStructure],
        signature: &Signature,
        codec: Codec,
    ) -> Result<Chunk, ChunkError> {
        if steps.is_empty() {
            return Err(ChunkError::Empty);
        }
        for (index, step) in steps.iter().enumerate() {
            check_signature(step, signature)
                .map_err(|mismatch| ChunkError::SignatureMismatch { index, mismatch })?;
        }
        let num_cols = signature.num_columns();
        let leaves_per_step: Vec<_> = steps.iter().map(|s| s.leaves()).collect();
        let mut columns = Vec::with_capacity(num_cols);
        let mut uncompressed = 0u64;
        let mut compressed = 0u64;
        for col in 0..num_cols {
            let row_bytes = signature.columns()[col].row_bytes();
            let mut raw = Vec::with_capacity(row_bytes * steps.len());
            for leaves in &leaves_per_step {
                raw.extend_from_slice(leaves[col].data());
            }
            let block = codec.compress(&raw);
            uncompressed += raw.len() as u64;
            compressed += block.len() as u64;
            columns.push(block);
        }
        Ok(Chunk {
            key,
            signature: signature.clone(),
            num_rows: steps.len() as u32,
            codec,
            columns,
            uncompressed_bytes: uncompressed,
            compressed_bytes: compressed,
        })
    }

    pub fn key(&self) -> ChunkKey {
        self.key
    }

    /// Keys are remapped server-side; the store assigns the authoritative key.
    pub(crate) fn set_key(&mut self, key: ChunkKey) {
        self.key = key;
    }

    pub fn signature(&self) -> &Signature {
        &self.signature
    }

    pub fn num_rows(&self) -> u32 {
        self.num_rows
    }

    pub fn codec(&self) -> Codec {
        self.codec
    }

    pub fn uncompressed_bytes(&self) -> u64 {
        self.uncompressed_bytes
    }

    pub fn compressed_bytes(&self) -> u64 {
        self.compressed_bytes
    }

    /// Decompresses all rows back into steps. `decode(build(steps)) == steps`.
    pub fn decode(&self) -> Result<Vec<StepStructure>, ChunkError> {
        self.decode_rows(0, self.num_rows as usize)
    }

    /// Decodes `len` steps starting at row `offset`.
    pub fn decode_rows(&self, offset: usize, len: usize) -> Result<Vec<StepStructure>, ChunkError> {
        let num_rows = self.num_rows as usize;
        if offset + len > num_rows {
            return Err(ChunkError::RowRange {
                offset,
                len,
                num_rows,
            });
        }
        let mut per_column: Vec<Vec<u8>> = Vec::with_capacity(self.columns.len());
        for (col, block) in self.columns.iter().enumerate() {
            let row_bytes = self.signature.columns()[col].row_bytes();
            per_column.push(self.codec.decompress(block, row_bytes * num_rows)?);
        }
        let mut steps = Vec::with_capacity(len);
        for row in offset..offset + len {
            let mut values = Vec::with_capacity(self.columns.len());
            for (col, spec) in self.signature.columns().iter().enumerate() {
                let row_bytes = spec.row_bytes();
                let bytes = per_column[col][row * row_bytes..(row + 1) * row_bytes].to_vec();
                values.push(
                    TensorValue::new(spec.dtype, spec.shape.clone(), bytes)
                        .map_err(|_| ChunkError::Corrupt("column row size"))?,
                );
            }
            steps.push(unflatten(&values, &self.signature).map_err(|_| {
                ChunkError::Corrupt("signature does not describe a valid structure")
            })?);
        }
        Ok(steps)
    }

    /// Wire/checkpoint encoding: key, num_rows, codec id, signature block,
    /// then per column a length-prefixed compressed block. Little-endian.
    pub fn encode(&self, out: &mut Vec<u8>) {
        out.put_u64(self.key.0);
        out.put_u32(self.num_rows);
        out.put_u8(self.codec.id());
        self.signature.encode(out);
        out.put_u32(self.columns.len() as u32);
        for block in &self.columns {
            out.put_block64(block);
        }
    }

    pub(crate) fn decode_wire_from(r: &mut Reader<'_>) -> Result<Chunk, DecodeError> {
        let key = ChunkKey(r.u64("chunk key")?);
        let num_rows = r.u32("num rows")?;
        if num_rows == 0 {
            return Err(DecodeError {
                pos: 0,
                what: "chunk with zero rows",
            });
        }
        let codec = Codec::from_id(r.u8("codec id")?).ok_or(DecodeError {
            pos: 0,
            what: "unknown codec id",
        })?;
        let signature = Signature::decode_from(r)?;
        let num_cols = r.u32("column count")? as usize;
        if num_cols != signature.num_columns() {
            return Err(DecodeError {
                pos: 0,
                what: "column count does not match signature",
            });
        }
        let mut columns = Vec::with_capacity(num_cols);
        let mut compressed = 0u64;
        for _ in 0..num_cols {
            let block = r.block64("column block")?;
            compressed += block.len() as u64;
            columns.push(block);
        }
        let uncompressed = signature.row_bytes() as u64 * num_rows as u64;
        Ok(Chunk {
            key,
            signature,
            num_rows,
            codec,
            columns,
            uncompressed_bytes: uncompressed,
            compressed_bytes: compressed,
        })
    }

    pub fn decode_wire(buf: &[u8]) -> Result<Chunk, DecodeError> {
        let mut r = Reader::new(buf);
        let chunk = Chunk::decode_wire_from(&mut r)?;
        r.finish("trailing bytes after chunk")?;
        Ok(chunk)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Dtype;
    use rand::{Rng, SeedableRng};

    fn frame_step(fill: impl Fn(usize) -> f32) -> StepStructure {
        let values: Vec<f32> = (0..84 * 84).map(fill).collect();
        StepStructure::single("frame", TensorValue::from_f32s(vec![84, 84], &values))
    }

    #[test]
    fn identical_rows_compress_below_threshold() {
        // Frozen threshold derived by running the codec on an
        // all-identical-rows buffer: deflate gets far below 15%.
        let steps: Vec<_> = (0..4).map(|_| frame_step(|i| (i % 7) as f32)).collect();
        let sig = Signature::of(&steps[0]);
        let chunk = Chunk::build(ChunkKey(1), &steps, &sig, Codec::Lz4).unwrap();
        assert!(chunk.compressed_bytes() as f64 <= 0.15 * chunk.uncompressed_bytes() as f64);
        assert_eq!(chunk.decode().unwrap(), steps);
    }

    #[test]
    fn single_step_round_trip() {
        let steps = vec![frame_step(|i| i as f32)];
        let sig = Signature::of(&steps[0]);
        let chunk = Chunk::build(ChunkKey(2), &steps, &sig, Codec::Lz4).unwrap();
        assert_eq!(chunk.num_rows(), 1);
        assert_eq!(chunk.decode().unwrap(), steps);
    }

    #[test]
    fn random_rows_round_trip_and_incompressible() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let steps: Vec<_> = (0..4)
            .map(|_| {
                let bytes: Vec<u8> = (0..4096).map(|_| rng.random::<u8>()).collect();
                let value = TensorValue::new(Dtype::Uint8, vec![4096], bytes).unwrap();
                StepStructure::single("x", value)
            })
            .collect();
        let sig = Signature::of(&steps[0]);
        let chunk = Chunk::build(ChunkKey(3), &steps, &sig, Codec::Lz4).unwrap();
        assert_eq!(chunk.decode().unwrap(), steps);
        let ratio = chunk.compressed_bytes() as f64 / chunk.uncompressed_bytes() as f64;
        assert!((0.95..=1.05).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn signature_mismatch_rejected() {
        let good = frame_step(|_| 0.0);
        let bad = StepStructure::single("frame", TensorValue::scalar_f32(0.0));
        let sig = Signature::of(&good);
        let err = Chunk::build(ChunkKey(4), &[good, bad], &sig, Codec::Lz4).unwrap_err();
        assert!(matches!(err, ChunkError::SignatureMismatch { index: 1, .. }));
    }

    #[test]
    fn wire_round_trip() {
        let steps: Vec<_> = (0..3).map(|r| frame_step(move |i| (i + r) as f32)).collect();
        let sig = Signature::of(&steps[0]);
        let chunk = Chunk::build(ChunkKey(9), &steps, &sig, Codec::Lz4).unwrap();
        let mut buf = Vec::new();
        chunk.encode(&mut buf);
        let back = Chunk::decode_wire(&buf).unwrap();
        assert_eq!(back, chunk);
    }

    #[test]
    fn decode_rows_slices() {
        let steps: Vec<_> = (0..5).map(|r| frame_step(move |i| (i * r) as f32)).collect();
        let sig = Signature::of(&steps[0]);
        let chunk = Chunk::build(ChunkKey(5), &steps, &sig, Codec::Raw).unwrap();
        assert_eq!(chunk.decode_rows(1, 3).unwrap(), steps[1..4].to_vec());
        assert!(chunk.decode_rows(3, 3).is_err());
    }

    #[test]
    fn int_dtypes_round_trip() {
        let mut step = StepStructure::new();
        step.push_tensor("a", TensorValue::scalar_i64(-5));
        step.push_tensor(
            "b",
            TensorValue::new(Dtype::Uint8, vec![3], vec![1, 2, 3]).unwrap(),
        );
        let sig = Signature::of(&step);
        let chunk = Chunk::build(ChunkKey(6), &[step.clone()], &sig, Codec::Lz4).unwrap();
        assert_eq!(chunk.decode().unwrap(), vec![step]);
    }
}
