//! Length-prefixed binary protocol: each frame is a u32 little-endian
//! payload length followed by a one-byte message tag and the payload.
//!
//! The decoder is defensive: declared lengths are validated against the
//! configured maximum before any allocation, and every field read is
//! bounds-checked, so a malformed or hostile frame can never read out of
//! bounds or trigger an oversized allocation.

use crate::binio::{BufWrite, DecodeError, Reader};
use crate::chunk::Chunk;
use std::io::{self, Read, Write};
use thiserror::Error;

/// Default cap on a single frame. Large enough for a 400 kB payload chunk
/// with headroom, small enough to bound per-connection memory.
pub const DEFAULT_MAX_FRAME_BYTES: u32 = 64 * 1024 * 1024;

#[derive(Debug, Error)]
pub enum WireError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("frame of {got} bytes exceeds limit {limit}")]
    FrameTooLarge { got: u32, limit: u32 },
    #[error("decode: {0}")]
    Decode(#[from] DecodeError),
    #[error("unknown message tag {0:#04x}")]
    UnknownTag(u8),
    #[error("connection closed")]
    Closed,
}

/// Stable error codes carried in [`Message::Error`] frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCode {
    NotFound = 1,
    InvalidArgument = 2,
    DeadlineExceeded = 3,
    ResourceExhausted = 4,
    Internal = 5,
}

impl ErrorCode {
    pub fn from_u32(v: u32) -> Option<ErrorCode> {
        match v {
            1 => Some(ErrorCode::NotFound),
            2 => Some(ErrorCode::InvalidArgument),
            3 => Some(ErrorCode::DeadlineExceeded),
            4 => Some(ErrorCode::ResourceExhausted),
            5 => Some(ErrorCode::Internal),
            _ => None,
        }
    }
}

/// One sampled item as it travels on the wire: metadata plus the full
/// chunks it references (the client trims to offset/length after decode).
#[derive(Debug, Clone, PartialEq)]
pub struct WireSample {
    pub key: u64,
    pub priority: f64,
    pub times_sampled: u32,
    pub probability: f64,
    pub table_size: u64,
    pub offset: u32,
    pub length: u32,
    pub chunks: Vec<Chunk>,
}

/// Per-table counters and configuration reported by ServerInfo.
#[derive(Debug, Clone, PartialEq)]
pub struct WireTableInfo {
    pub name: String,
    pub size: u64,
    pub max_size: u64,
    pub max_times_sampled: u32,
    pub sampler: u8,
    pub remover: u8,
    pub inserts: u64,
    pub samples: u64,
    pub deletes: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    /// Writer -> server: one chunk, keyed by a client-chosen stream-local id.
    InsertChunk(Chunk),
    /// Writer -> server: create an item over previously sent chunks.
    CreateItem {
        table: String,
        chunk_keys: Vec<u64>,
        offset: u32,
        length: u32,
        priority: f64,
    },
    /// Server -> writer: cumulative confirmed item count plus the chunk-key
    /// watermark; every client key at or below it is safe to forget.
    InsertAck { confirmed_items: u64, chunk_watermark: u64 },
    /// Client -> server: open a flow-controlled sample stream.
    SampleRequest {
        table: String,
        max_in_flight: u32,
        /// Total samples wanted; -1 means unbounded.
        num_samples: i64,
        /// Per-sample table timeout; -1 means wait forever.
        timeout_ms: i64,
    },
    SampleResponse(WireSample),
    /// Client -> server: replenish `credits` slots of the in-flight window.
    SampleAck { credits: u32 },
    UpdatePriorities { table: String, updates: Vec<(u64, f64)> },
    UpdatePrioritiesReply { applied: u64 },
    Checkpoint,
    CheckpointReply { id: String },
    ServerInfoRequest,
    ServerInfoReply { tables: Vec<WireTableInfo> },
    Error { code: ErrorCode, detail: String },
    /// Server -> client: the sample stream ended cleanly (count reached or
    /// table timeout).
    EndOfData,
}

impl Message {
    fn tag(&self) -> u8 {
        match self {
            Message::InsertChunk(_) => 0x01,
            Message::CreateItem { .. } => 0x02,
            Message::InsertAck { .. } => 0x03,
            Message::SampleRequest { .. } => 0x04,
            Message::SampleResponse(_) => 0x05,
            Message::SampleAck { .. } => 0x06,
            Message::UpdatePriorities { .. } => 0x07,
            Message::UpdatePrioritiesReply { .. } => 0x08,
            Message::Checkpoint => 0x09,
            Message::CheckpointReply { .. } => 0x0a,
            Message::ServerInfoRequest => 0x0b,
            Message::ServerInfoReply { .. } => 0x0c,
            Message::Error { .. } => 0x0d,
            Message::EndOfData => 0x0e,
        }
    }

    /// Tag byte plus payload, without the outer length prefix.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.put_u8(self.tag());
        match self {
            Message::InsertChunk(chunk) => chunk.encode(&mut out),
            Message::CreateItem {
                table,
                chunk_keys,
                offset,
                length,
                priority,
            } => {
                out.put_str16(table);
                out.put_u32(chunk_keys.len() as u32);
                for k in chunk_keys {
                    out.put_u64(*k);
                }
                out.put_u32(*offset);
                out.put_u32(*length);
                out.put_f64(*priority);
            }
            Message::InsertAck {
                confirmed_items,
                chunk_watermark,
            } => {
                out.put_u64(*confirmed_items);
                out.put_u64(*chunk_watermark);
            }
            Message::SampleRequest {
                table,
                max_in_flight,
                num_samples,
                timeout_ms,
            } => {
                out.put_str16(table);
                out.put_u32(*max_in_flight);
                out.put_i64(*num_samples);
                out.put_i64(*timeout_ms);
            }
            Message::SampleResponse(s) => {
                out.put_u64(s.key);
                out.put_f64(s.priority);
                out.put_u32(s.times_sampled);
                out.put_f64(s.probability);
                out.put_u64(s.table_size);
                out.put_u32(s.offset);
                out.put_u32(s.length);
                out.put_u32(s.chunks.len() as u32);
                for chunk in &s.chunks {
                    chunk.encode(&mut out);
                }
            }
            Message::SampleAck { credits } => out.put_u32(*credits),
            Message::UpdatePriorities { table, updates } => {
                out.put_str16(table);
                out.put_u32(updates.len() as u32);
                for (k, p) in updates {
                    out.put_u64(*k);
                    out.put_f64(*p);
                }
            }
            Message::UpdatePrioritiesReply { applied } => out.put_u64(*applied),
            Message::Checkpoint => {}
            Message::CheckpointReply { id } => out.put_str16(id),
            Message::ServerInfoRequest => {}
            Message::ServerInfoReply { tables } => {
                out.put_u32(tables.len() as u32);
                for t in tables {
                    out.put_str16(&t.name);
                    out.put_u64(t.size);
                    out.put_u64(t.max_size);
                    out.put_u32(t.max_times_sampled);
                    out.put_u8(t.sampler);
                    out.put_u8(t.remover);
                    out.put_u64(t.inserts);
                    out.put_u64(t.samples);
                    out.put_u64(t.deletes);
                }
            }
            Message::Error { code, detail } => {
                out.put_u32(*code as u32);
                out.put_str16(detail);
            }
            Message::EndOfData => {}
        }
        out
    }

    /// Decodes a tag+payload buffer produced by [`Message::encode`].
    pub fn decode(buf: &[u8]) -> Result<Message, WireError> {
        let mut r = Reader::new(buf);
        let tag = r.u8("message tag")?;
        let msg = match tag {
            0x01 => Message::InsertChunk(Chunk::decode_wire_from(&mut r)?),
            0x02 => {
                let table = r.str16("table name")?;
                let n = r.u32("chunk key count")? as usize;
                if n * 8 > r.remaining() {
                    return Err(DecodeError {
                        pos: 0,
                        what: "chunk key count exceeds frame",
                    }
                    .into());
                }
                let mut chunk_keys = Vec::with_capacity(n);
                for _ in 0..n {
                    chunk_keys.push(r.u64("chunk key")?);
                }
                Message::CreateItem {
                    table,
                    chunk_keys,
                    offset: r.u32("offset")?,
                    length: r.u32("length")?,
                    priority: r.f64("priority")?,
                }
            }
            0x03 => Message::InsertAck {
                confirmed_items: r.u64("confirmed items")?,
                chunk_watermark: r.u64("chunk watermark")?,
            },
            0x04 => Message::SampleRequest {
                table: r.str16("table name")?,
                max_in_flight: r.u32("max in flight")?,
                num_samples: r.i64("num samples")?,
                timeout_ms: r.i64("timeout ms")?,
            },
            0x05 => {
                let key = r.u64("item key")?;
                let priority = r.f64("priority")?;
                let times_sampled = r.u32("times sampled")?;
                let probability = r.f64("probability")?;
                let table_size = r.u64("table size")?;
                let offset = r.u32("offset")?;
                let length = r.u32("length")?;
                let n = r.u32("chunk count")? as usize;
                let mut chunks = Vec::with_capacity(n.min(1024));
                for _ in 0..n {
                    chunks.push(Chunk::decode_wire_from(&mut r)?);
                }
                Message::SampleResponse(WireSample {
                    key,
                    priority,
                    times_sampled,
                    probability,
                    table_size,
                    offset,
                    length,
                    chunks,
                })
            }
            0x06 => Message::SampleAck {
                credits: r.u32("credits")?,
            },
            0x07 => {
                let table = r.str16("table name")?;
                let n = r.u32("update count")? as usize;
                if n * 16 > r.remaining() {
                    return Err(DecodeError {
                        pos: 0,
                        what: "update count exceeds frame",
                    }
                    .into());
                }
                let mut updates = Vec::with_capacity(n);
                for _ in 0..n {
                    updates.push((r.u64("item key")?, r.f64("priority")?));
                }
                Message::UpdatePriorities { table, updates }
            }
            0x08 => Message::UpdatePrioritiesReply {
                applied: r.u64("applied count")?,
            },
            0x09 => Message::Checkpoint,
            0x0a => Message::CheckpointReply {
                id: r.str16("checkpoint id")?,
            },
            0x0b => Message::ServerInfoRequest,
            0x0c => {
                let n = r.u32("table count")? as usize;
                let mut tables = Vec::with_capacity(n.min(1024));
                for _ in 0..n {
                    tables.push(WireTableInfo {
                        name: r.str16("table name")?,
                        size: r.u64("size")?,
                        max_size: r.u64("max size")?,
                        max_times_sampled: r.u32("max times sampled")?,
                        sampler: r.u8("sampler code")?,
                        remover: r.u8("remover code")?,
                        inserts: r.u64("inserts")?,
                        samples: r.u64("samples")?,
                        deletes: r.u64("deletes")?,
                    });
                }
                Message::ServerInfoReply { tables }
            }
            0x0d => {
                let raw = r.u32("error code")?;
                let code = ErrorCode::from_u32(raw).ok_or(DecodeError {
                    pos: 0,
                    what: "unknown error code",
                })?;
                Message::Error {
                    code,
                    detail: r.str16("error detail")?,
                }
            }
            0x0e => Message::EndOfData,
            other => return Err(WireError::UnknownTag(other)),
        };
        r.finish("trailing bytes after message")?;
        Ok(msg)
    }
}

/// Writes one frame: u32 length then the encoded message.
pub fn write_message<W: Write>(w: &mut W, msg: &Message) -> Result<(), WireError> {
    let body = msg.encode();
    let len = body.len() as u32;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(&body)?;
    w.flush()?;
    Ok(())
}

/// Reads one frame, enforcing `max_frame_bytes` before allocating.
/// Returns `WireError::Closed` on clean EOF at a frame boundary.
pub fn read_message<R: Read>(r: &mut R, max_frame_bytes: u32) -> Result<Message, WireError> {
    let mut len_buf = [0u8; 4];
    match r.read_exact(&mut len_buf) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Err(WireError::Closed),
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_le_bytes(len_buf);
    if len > max_frame_bytes {
        return Err(WireError::FrameTooLarge {
            got: len,
            limit: max_frame_bytes,
        });
    }
    if len == 0 {
        return Err(DecodeError {
            pos: 0,
            what: "empty frame",
        }
        .into());
    }
    let mut body = vec![0u8; len as usize];
    r.read_exact(&mut body)?;
    Message::decode(&body)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chunk::{ChunkKey, Codec};
    use crate::tensor::{Signature, StepStructure, TensorValue};

    fn sample_chunk() -> Chunk {
        let step = StepStructure::single("x", TensorValue::from_f32s(vec![3], &[1.0, 2.0, 3.0]));
        Chunk::build(ChunkKey(42), &[step.clone(), step.clone()], &Signature::of(&step), Codec::Lz4)
            .unwrap()
    }

    fn all_messages() -> Vec<Message> {
        vec![
            Message::InsertChunk(sample_chunk()),
            Message::CreateItem {
                table: "t".into(),
                chunk_keys: vec![1, 2, 3],
                offset: 1,
                length: 7,
                priority: 2.5,
            },
            Message::InsertAck {
                confirmed_items: 10,
                chunk_watermark: 3,
            },
            Message::SampleRequest {
                table: "t".into(),
                max_in_flight: 8,
                num_samples: -1,
                timeout_ms: 250,
            },
            Message::SampleResponse(WireSample {
                key: 9,
                priority: 1.25,
                times_sampled: 2,
                probability: 0.5,
                table_size: 100,
                offset: 1,
                length: 1,
                chunks: vec![sample_chunk()],
            }),
            Message::SampleAck { credits: 4 },
            Message::UpdatePriorities {
                table: "t".into(),
                updates: vec![(1, 0.5), (2, 9.0)],
            },
            Message::UpdatePrioritiesReply { applied: 2 },
            Message::Checkpoint,
            Message::CheckpointReply { id: "ckpt-3".into() },
            Message::ServerInfoRequest,
            Message::ServerInfoReply {
                tables: vec![WireTableInfo {
                    name: "t".into(),
                    size: 5,
                    max_size: 100,
                    max_times_sampled: 0,
                    sampler: 5,
                    remover: 0,
                    inserts: 7,
                    samples: 3,
                    deletes: 2,
                }],
            },
            Message::Error {
                code: ErrorCode::DeadlineExceeded,
                detail: "timed out".into(),
            },
            Message::EndOfData,
        ]
    }

    #[test]
    fn every_message_round_trips() {
        for msg in all_messages() {
            let encoded = msg.encode();
            let decoded = Message::decode(&encoded).unwrap();
            assert_eq!(decoded, msg);
        }
    }

    #[test]
    fn framed_round_trip_over_a_byte_pipe() {
        let mut pipe = Vec::new();
        for msg in all_messages() {
            write_message(&mut pipe, &msg).unwrap();
        }
        let mut cursor = std::io::Cursor::new(pipe);
        for msg in all_messages() {
            assert_eq!(read_message(&mut cursor, DEFAULT_MAX_FRAME_BYTES).unwrap(), msg);
        }
        assert!(matches!(
            read_message(&mut cursor, DEFAULT_MAX_FRAME_BYTES),
            Err(WireError::Closed)
        ));
    }

    #[test]
    fn oversized_frame_rejected_before_allocation() {
        // 4 GiB declared length with 1 byte of actual data.
        let mut pipe = Vec::new();
        pipe.extend_from_slice(&u32::MAX.to_le_bytes());
        pipe.push(0x0e);
        let mut cursor = std::io::Cursor::new(pipe);
        assert!(matches!(
            read_message(&mut cursor, DEFAULT_MAX_FRAME_BYTES),
            Err(WireError::FrameTooLarge { .. })
        ));
    }

    #[test]
    fn truncations_never_panic() {
        for msg in all_messages() {
            let encoded = msg.encode();
            for cut in 0..encoded.len() {
                // Either a clean decode error or (for prefixes that happen to
                // be self-delimiting) a valid message; never a panic.
                let _ = Message::decode(&encoded[..cut]);
            }
        }
    }

    #[test]
    fn bogus_inner_counts_rejected_without_huge_allocation() {
        // CreateItem declaring u32::MAX chunk keys in a tiny frame.
        let mut body = Vec::new();
        body.put_u8(0x02);
        body.put_str16("t");
        body.put_u32(u32::MAX);
        assert!(Message::decode(&body).is_err());

        // UpdatePriorities with an impossible count.
        let mut body = Vec::new();
        body.put_u8(0x07);
        body.put_str16("t");
        body.put_u32(1 << 30);
        assert!(Message::decode(&body).is_err());
    }

    #[test]
    fn unknown_tag_rejected() {
        assert!(matches!(
            Message::decode(&[0xff, 0, 0]),
            Err(WireError::UnknownTag(0xff))
        ));
    }

    #[test]
    fn random_bytes_never_panic() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..2_000 {
            let len = rng.random_range(0..256);
            let buf: Vec<u8> = (0..len).map(|_| rng.random()).collect();
            let _ = Message::decode(&buf);
        }
    }
}
