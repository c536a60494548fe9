//! Atomic on-disk snapshots of all tables plus the chunks they reference.
//!
//! A checkpoint is one file: magic, version, metadata, a block per table
//! (config, limiter counters, items in insertion order), a deduplicated
//! chunk section, and a trailing SHA-256 over everything before it. Files
//! are written to a temp name and renamed into place, so a crash mid-save
//! can never leave a loadable-but-wrong checkpoint.

use crate::binio::{BufWrite, DecodeError, Reader};
use crate::chunk::{Chunk, ChunkKey};
use crate::chunk_store::ChunkStore;
use crate::rate_limiter::RateLimiterConfig;
use crate::selector::{SelectorConfig, SelectorKind};
use crate::table::{Item, ItemKey, Table, TableConfig, TableError, TableExtension};
use crate::tensor::Signature;
use sha2::{Digest, Sha256};
use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use thiserror::Error;

const MAGIC: &[u8; 8] = b"RPLYCKPT";
const VERSION: u32 = 1;
const EXTENSION: &str = "rpck";
const HASH_LEN: usize = 32;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("integrity hash mismatch (file corrupt or truncated)")]
    BadHash,
    #[error("decode: {0}")]
    Decode(#[from] DecodeError),
    #[error("table restore failed: {0}")]
    Table(#[from] TableError),
    #[error("chunk store rejected restored chunk: {0}")]
    Store(#[from] crate::chunk_store::StoreError),
    #[error("no checkpoint found in {0}")]
    NotFound(PathBuf),
}

/// Monotonic suffix so two saves in the same millisecond get distinct ids.
static SAVE_SEQ: AtomicU64 = AtomicU64::new(0);

fn encode_selector(out: &mut Vec<u8>, config: &SelectorConfig) {
    out.put_u8(config.kind.code());
    out.put_f64(config.priority_exponent);
}

fn decode_selector(r: &mut Reader<'_>) -> Result<SelectorConfig, DecodeError> {
    let code = r.u8("selector kind")?;
    let kind = SelectorKind::from_code(code).ok_or(DecodeError {
        pos: 0,
        what: "unknown selector kind",
    })?;
    Ok(SelectorConfig {
        kind,
        priority_exponent: r.f64("priority exponent")?,
    })
}

fn encode_table_config(out: &mut Vec<u8>, config: &TableConfig) {
    out.put_str16(&config.name);
    encode_selector(out, &config.sampler);
    encode_selector(out, &config.remover);
    out.put_u64(config.max_size);
    out.put_u32(config.max_times_sampled);
    out.put_u64(config.rate_limiter.min_size_to_sample);
    out.put_f64(config.rate_limiter.samples_per_insert);
    out.put_f64(config.rate_limiter.min_diff);
    out.put_f64(config.rate_limiter.max_diff);
    match &config.signature {
        None => out.put_u8(0),
        Some(sig) => {
            out.put_u8(1);
            sig.encode(out);
        }
    }
    out.put_u64(config.rng_seed);
}

fn decode_table_config(r: &mut Reader<'_>) -> Result<TableConfig, DecodeError> {
    let name = r.str16("table name")?;
    let sampler = decode_selector(r)?;
    let remover = decode_selector(r)?;
    let max_size = r.u64("max size")?;
    let max_times_sampled = r.u32("max times sampled")?;
    let rate_limiter = RateLimiterConfig {
        min_size_to_sample: r.u64("limiter min size")?,
        samples_per_insert: r.f64("limiter spi")?,
        min_diff: r.f64("limiter min diff")?,
        max_diff: r.f64("limiter max diff")?,
    };
    let signature = match r.u8("signature flag")? {
        0 => None,
        _ => Some(Signature::decode_from(r)?),
    };
    Ok(TableConfig {
        name,
        sampler,
        remover,
        max_size,
        max_times_sampled,
        rate_limiter,
        signature,
        rng_seed: r.u64("rng seed")?,
    })
}

fn encode_item(out: &mut Vec<u8>, item: &Item) {
    out.put_u64(item.key.0);
    out.put_f64(item.priority);
    out.put_u32(item.chunk_keys.len() as u32);
    for ck in &item.chunk_keys {
        out.put_u64(ck.0);
    }
    out.put_u32(item.offset);
    out.put_u32(item.length);
    out.put_u32(item.times_sampled);
}

fn decode_item(r: &mut Reader<'_>) -> Result<Item, DecodeError> {
    let key = ItemKey(r.u64("item key")?);
    let priority = r.f64("priority")?;
    let n = r.u32("chunk key count")? as usize;
    if n * 8 > r.remaining() {
        return Err(DecodeError {
            pos: 0,
            what: "chunk key count exceeds file",
        });
    }
    let mut chunk_keys = Vec::with_capacity(n);
    for _ in 0..n {
        chunk_keys.push(ChunkKey(r.u64("chunk key")?));
    }
    Ok(Item {
        key,
        priority,
        chunk_keys,
        offset: r.u32("offset")?,
        length: r.u32("length")?,
        times_sampled: r.u32("times sampled")?,
    })
}

struct TableRecord {
    config: TableConfig,
    counters: (u64, u64, u64),
    items: Vec<Item>,
}

/// Serializes all tables and their chunks. The caller is the server, which
/// already blocks mutations by holding every table lock for the duration;
/// locks are taken here in name order to keep the lock hierarchy fixed.
///
/// Returns the checkpoint id (also the file stem).
pub fn save(
    dir: &Path,
    tables: &[Arc<Table>],
    store: &ChunkStore,
    keep: usize,
) -> Result<String, CheckpointError> {
    std::fs::create_dir_all(dir)?;

    let mut ordered: Vec<&Arc<Table>> = tables.iter().collect();
    ordered.sort_by(|a, b| a.config().name.cmp(&b.config().name));
    // All table locks held at once: no insert/sample/update/delete can run
    // anywhere until the file is on disk.
    let guards: Vec<_> = ordered.iter().map(|t| t.lock_state()).collect();
    let records: Vec<TableRecord> = ordered
        .iter()
        .zip(&guards)
        .map(|(t, g)| {
            let snap = t.snapshot_locked(g);
            TableRecord {
                config: t.config().clone(),
                counters: (snap.inserts, snap.samples, snap.deletes),
                items: snap.items,
            }
        })
        .collect();

    // Every chunk referenced by any item, once, in key order.
    let chunk_keys: BTreeSet<ChunkKey> = records
        .iter()
        .flat_map(|r| r.items.iter())
        .flat_map(|i| i.chunk_keys.iter().copied())
        .collect();
    let keys: Vec<ChunkKey> = chunk_keys.into_iter().collect();
    let chunks = store.get(&keys).expect("item references a resident chunk");

    let mut body = Vec::new();
    body.extend_from_slice(MAGIC);
    body.put_u32(VERSION);
    let created_ms = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0);
    body.put_u64(created_ms);
    body.put_u32(records.len() as u32);
    for record in &records {
        encode_table_config(&mut body, &record.config);
        body.put_u64(record.counters.0);
        body.put_u64(record.counters.1);
        body.put_u64(record.counters.2);
        body.put_u32(record.items.len() as u32);
        for item in &record.items {
            encode_item(&mut body, item);
        }
    }
    body.put_u32(chunks.len() as u32);
    for chunk in &chunks {
        chunk.encode(&mut body);
    }
    let hash = Sha256::digest(&body);
    body.extend_from_slice(&hash);

    let seq = SAVE_SEQ.fetch_add(1, Ordering::Relaxed);
    let id = format!("ckpt-{created_ms}-{seq}");
    let tmp = dir.join(format!(".{id}.tmp"));
    let final_path = dir.join(format!("{id}.{EXTENSION}"));
    let write = (|| -> std::io::Result<()> {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&body)?;
        f.sync_all()?;
        Ok(())
    })();
    if let Err(e) = write {
        let _ = std::fs::remove_file(&tmp);
        return Err(e.into());
    }
    std::fs::rename(&tmp, &final_path)?;
    drop(guards);

    prune(dir, keep.max(1));
    Ok(id)
}

/// Removes all but the newest `keep` checkpoint files. Best-effort: an
/// unremovable stale file never fails a save.
fn prune(dir: &Path, keep: usize) {
    let Ok(entries) = std::fs::read_dir(dir) else {
        return;
    };
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == EXTENSION))
        .collect();
    // Ids embed (timestamp, sequence), so lexicographic order of equal-shape
    // names tracks creation order; fall back to mtime-insensitive name sort.
    files.sort();
    if files.len() > keep {
        let drop_n = files.len() - keep;
        for path in &files[..drop_n] {
            let _ = std::fs::remove_file(path);
        }
    }
}

/// All checkpoint files in `dir`, oldest first.
pub fn list(dir: &Path) -> Vec<PathBuf> {
    let Ok(entries) = std::fs::read_dir(dir) else {
        return Vec::new();
    };
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == EXTENSION))
        .collect();
    files.sort();
    files
}

/// Outcome of a restore: reconstructed tables plus key-space floors the
/// server must respect so restored ids are never reissued.
pub struct Restored {
    pub tables: Vec<Table>,
    pub max_item_key: u64,
}

/// Loads a checkpoint file, inserts its chunks into `store`, and rebuilds
/// every table (items, priorities, sample counts, limiter counters, and
/// selector insertion order). `extensions_for` supplies fresh extensions
/// per table name.
pub fn restore(
    path: &Path,
    store: &Arc<ChunkStore>,
    mut extensions_for: impl FnMut(&str) -> Vec<Box<dyn TableExtension>>,
) -> Result<Restored, CheckpointError> {
    let raw = std::fs::read(path)?;
    if raw.len() < MAGIC.len() + HASH_LEN || &raw[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let (body, hash) = raw.split_at(raw.len() - HASH_LEN);
    if Sha256::digest(body).as_slice() != hash {
        return Err(CheckpointError::BadHash);
    }

    let mut r = Reader::new(&body[MAGIC.len()..]);
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let _created_ms = r.u64("created timestamp")?;
    let num_tables = r.u32("table count")? as usize;
    let mut records = Vec::with_capacity(num_tables.min(1024));
    for _ in 0..num_tables {
        let config = decode_table_config(&mut r)?;
        let counters = (
            r.u64("inserts")?,
            r.u64("samples")?,
            r.u64("deletes")?,
        );
        let n = r.u32("item count")? as usize;
        let mut items = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            items.push(decode_item(&mut r)?);
        }
        records.push(TableRecord {
            config,
            counters,
            items,
        });
    }
    let num_chunks = r.u32("chunk count")? as usize;
    let mut chunks: Vec<Chunk> = Vec::with_capacity(num_chunks.min(1 << 20));
    for _ in 0..num_chunks {
        chunks.push(Chunk::decode_wire_from(&mut r)?);
    }
    r.finish("trailing bytes after chunk section")?;

    let mut max_chunk_key = 0u64;
    for chunk in chunks {
        max_chunk_key = max_chunk_key.max(chunk.key().0);
        store.insert(chunk)?;
    }
    store.reserve_keys_through(max_chunk_key);

    let mut tables = Vec::with_capacity(records.len());
    let mut max_item_key = 0u64;
    for record in records {
        for item in &record.items {
            max_item_key = max_item_key.max(item.key.0);
        }
        let extensions = extensions_for(&record.config.name);
        tables.push(Table::restore(
            record.config,
            Arc::clone(store),
            record.counters,
            record.items,
            extensions,
        )?);
    }
    Ok(Restored {
        tables,
        max_item_key,
    })
}

/// Restores the newest checkpoint in `dir`, or errors if none exists.
pub fn restore_latest(
    dir: &Path,
    store: &Arc<ChunkStore>,
    extensions_for: impl FnMut(&str) -> Vec<Box<dyn TableExtension>>,
) -> Result<Restored, CheckpointError> {
    let files = list(dir);
    let Some(path) = files.last() else {
        return Err(CheckpointError::NotFound(dir.to_path_buf()));
    };
    restore(path, store, extensions_for)
}
