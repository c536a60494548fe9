//! TCP server: one handler thread per connection, tables shared behind
//! their own locks. Writer streams remap client-chosen chunk keys onto
//! server keys; sample streams run a credit window so at most
//! `max_in_flight` responses are ever unacknowledged.

use crate::checkpoint;
use crate::chunk::ChunkKey;
use crate::chunk_store::ChunkStore;
use crate::config::{ConfigError, ServerConfig};
use crate::table::{Item, ItemKey, Table, TableError};
use crate::wire::{
    read_message, write_message, ErrorCode, Message, WireError, WireSample, WireTableInfo,
};
use std::collections::HashMap;
use std::io::{BufReader, BufWriter, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("bind {addr}: {source}")]
    Bind {
        addr: String,
        source: std::io::Error,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] checkpoint::CheckpointError),
    #[error("table: {0}")]
    Table(#[from] TableError),
}

struct Shared {
    tables: HashMap<String, Arc<Table>>,
    store: Arc<ChunkStore>,
    next_item_key: AtomicU64,
    checkpoint_dir: Option<PathBuf>,
    checkpoint_keep: usize,
    max_frame_bytes: u32,
    shutdown: AtomicBool,
}

impl Shared {
    fn next_item_key(&self) -> ItemKey {
        ItemKey(self.next_item_key.fetch_add(1, Ordering::Relaxed))
    }

    fn all_tables(&self) -> Vec<Arc<Table>> {
        self.tables.values().map(Arc::clone).collect()
    }
}

pub struct Server {
    shared: Arc<Shared>,
    addr: SocketAddr,
    accept_thread: Option<std::thread::JoinHandle<()>>,
}

impl Server {
    /// Binds, restores the newest checkpoint if one exists, and begins
    /// accepting connections. Tables named in the config but absent from
    /// the checkpoint are created fresh.
    pub fn start(config: ServerConfig) -> Result<Server, ServerError> {
        let store = Arc::new(ChunkStore::new());
        let mut tables: HashMap<String, Arc<Table>> = HashMap::new();
        let mut next_item_key = 1u64;

        if let Some(dir) = &config.checkpoint_dir {
            if !checkpoint::list(dir).is_empty() {
                let restored = checkpoint::restore_latest(dir, &store, |_| Vec::new())?;
                next_item_key = restored.max_item_key + 1;
                for table in restored.tables {
                    tables.insert(table.config().name.clone(), Arc::new(table));
                }
            }
        }
        for table_config in config.table_configs()? {
            if !tables.contains_key(&table_config.name) {
                let table = Table::new(table_config, Arc::clone(&store))?;
                tables.insert(table.config().name.clone(), Arc::new(table));
            }
        }

        let listener = TcpListener::bind(&config.listen).map_err(|source| ServerError::Bind {
            addr: config.listen.clone(),
            source,
        })?;
        let addr = listener.local_addr().expect("bound listener has an address");
        listener
            .set_nonblocking(true)
            .expect("nonblocking accept supported");

        let shared = Arc::new(Shared {
            tables,
            store,
            next_item_key: AtomicU64::new(next_item_key),
            checkpoint_dir: config.checkpoint_dir.clone(),
            checkpoint_keep: config.checkpoint_keep,
            max_frame_bytes: config.max_frame_bytes,
            shutdown: AtomicBool::new(false),
        });

        let accept_shared = Arc::clone(&shared);
        let accept_thread = std::thread::Builder::new()
            .name("replay-accept".into())
            .spawn(move || accept_loop(listener, accept_shared))
            .expect("spawn accept thread");

        Ok(Server {
            shared,
            addr,
            accept_thread: Some(accept_thread),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn table(&self, name: &str) -> Option<Arc<Table>> {
        self.shared.tables.get(name).map(Arc::clone)
    }

    pub fn store(&self) -> &Arc<ChunkStore> {
        &self.shared.store
    }

    /// Stops accepting new connections. Existing connections run until
    /// their clients disconnect.
    pub fn shutdown(&mut self) {
        self.shared.shutdown.store(true, Ordering::SeqCst);
        if let Some(handle) = self.accept_thread.take() {
            let _ = handle.join();
        }
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn accept_loop(listener: TcpListener, shared: Arc<Shared>) {
    while !shared.shutdown.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, _)) => {
                let conn_shared = Arc::clone(&shared);
                let _ = std::thread::Builder::new()
                    .name("replay-conn".into())
                    .spawn(move || {
                        if let Err(e) = handle_connection(stream, conn_shared) {
                            log::debug!("connection ended: {e}");
                        }
                    });
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                std::thread::sleep(Duration::from_millis(5));
            }
            Err(e) => {
                log::warn!("accept failed: {e}");
                std::thread::sleep(Duration::from_millis(50));
            }
        }
    }
}

/// Per-connection writer-stream state.
struct StreamState {
    /// Client chunk key -> server chunk key. The server holds one chunk
    /// store ref per entry until the entry is retired.
    chunk_map: HashMap<u64, ChunkKey>,
    confirmed_items: u64,
    /// Highest client chunk key the client may forget. Also the retirement
    /// cursor for the server's stream-held refs.
    watermark: u64,
}

impl StreamState {
    fn new() -> StreamState {
        StreamState {
            chunk_map: HashMap::new(),
            confirmed_items: 0,
            watermark: 0,
        }
    }

    /// Writers reference a sliding window of trailing steps, so once an
    /// item's oldest referenced chunk is `k`, no later item on this stream
    /// will reach below `k`. Stream-held refs below that point are dropped
    /// and the client is told it may forget those chunks.
    fn retire_below(&mut self, min_referenced: u64, store: &ChunkStore) {
        if min_referenced == 0 {
            return;
        }
        let new_watermark = min_referenced - 1;
        if new_watermark <= self.watermark {
            return;
        }
        let retired: Vec<u64> = self
            .chunk_map
            .keys()
            .copied()
            .filter(|k| *k > self.watermark && *k <= new_watermark)
            .collect();
        for client_key in retired {
            let server_key = self.chunk_map.remove(&client_key).unwrap();
            store.release_ref(server_key);
        }
        self.watermark = new_watermark;
    }
}

fn table_not_found(name: &str) -> Message {
    Message::Error {
        code: ErrorCode::NotFound,
        detail: format!("no such table {name:?}"),
    }
}

fn handle_connection(stream: TcpStream, shared: Arc<Shared>) -> Result<(), WireError> {
    stream.set_nodelay(true).ok();
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream.try_clone()?);
    let mut state = StreamState::new();

    let result = loop {
        let msg = match read_message(&mut reader, shared.max_frame_bytes) {
            Ok(msg) => msg,
            Err(WireError::Closed) => break Ok(()),
            Err(e) => {
                // Malformed traffic: report once, then drop the connection.
                let _ = write_message(
                    &mut writer,
                    &Message::Error {
                        code: ErrorCode::InvalidArgument,
                        detail: e.to_string(),
                    },
                );
                break Err(e);
            }
        };
        match msg {
            Message::InsertChunk(chunk) => {
                let client_key = chunk.key().0;
                if state.chunk_map.contains_key(&client_key) {
                    write_message(
                        &mut writer,
                        &Message::Error {
                            code: ErrorCode::InvalidArgument,
                            detail: format!("duplicate chunk key {client_key} on this stream"),
                        },
                    )?;
                    break Ok(());
                }
                let server_key = shared
                    .store
                    .insert_remapped(chunk)
                    .expect("fresh server key cannot collide");
                shared
                    .store
                    .add_ref(server_key)
                    .expect("just-inserted chunk is resident");
                state.chunk_map.insert(client_key, server_key);
            }
            Message::CreateItem {
                table,
                chunk_keys,
                offset,
                length,
                priority,
            } => {
                let Some(target) = shared.tables.get(&table) else {
                    write_message(&mut writer, &table_not_found(&table))?;
                    break Ok(());
                };
                let mut server_keys = Vec::with_capacity(chunk_keys.len());
                let mut min_referenced = u64::MAX;
                let mut missing = None;
                for ck in &chunk_keys {
                    match state.chunk_map.get(ck) {
                        Some(sk) => {
                            server_keys.push(*sk);
                            min_referenced = min_referenced.min(*ck);
                        }
                        None => {
                            missing = Some(*ck);
                            break;
                        }
                    }
                }
                if let Some(ck) = missing {
                    // Referencing a never-sent chunk is a protocol error.
                    write_message(
                        &mut writer,
                        &Message::Error {
                            code: ErrorCode::InvalidArgument,
                            detail: format!("item references chunk {ck} never sent on this stream"),
                        },
                    )?;
                    break Ok(());
                }
                let item = Item {
                    key: shared.next_item_key(),
                    priority,
                    chunk_keys: server_keys,
                    offset,
                    length,
                    times_sampled: 0,
                };
                // Blocks under a closed rate limiter: backpressure reaches
                // the writer because no ack is sent until this returns.
                match target.insert_or_assign(item, None) {
                    Ok(()) => {
                        state.confirmed_items += 1;
                        state.retire_below(min_referenced, &shared.store);
                        write_message(
                            &mut writer,
                            &Message::InsertAck {
                                confirmed_items: state.confirmed_items,
                                chunk_watermark: state.watermark,
                            },
                        )?;
                    }
                    Err(e) => {
                        write_message(
                            &mut writer,
                            &Message::Error {
                                code: match e {
                                    TableError::Timeout => ErrorCode::DeadlineExceeded,
                                    TableError::MissingChunk(_) => ErrorCode::Internal,
                                    _ => ErrorCode::InvalidArgument,
                                },
                                detail: e.to_string(),
                            },
                        )?;
                        break Ok(());
                    }
                }
            }
            Message::SampleRequest {
                table,
                max_in_flight,
                num_samples,
                timeout_ms,
            } => {
                let Some(target) = shared.tables.get(&table) else {
                    write_message(&mut writer, &table_not_found(&table))?;
                    break Ok(());
                };
                if max_in_flight == 0 {
                    write_message(
                        &mut writer,
                        &Message::Error {
                            code: ErrorCode::InvalidArgument,
                            detail: "max_in_flight must be positive".into(),
                        },
                    )?;
                    break Ok(());
                }
                // The connection becomes a dedicated sample stream.
                let r = serve_sample_stream(
                    reader,
                    writer,
                    Arc::clone(target),
                    &shared,
                    max_in_flight,
                    num_samples,
                    timeout_ms,
                );
                break r;
            }
            Message::UpdatePriorities { table, updates } => {
                let Some(target) = shared.tables.get(&table) else {
                    write_message(&mut writer, &table_not_found(&table))?;
                    continue;
                };
                let typed: Vec<(ItemKey, f64)> =
                    updates.iter().map(|(k, p)| (ItemKey(*k), *p)).collect();
                let applied = target.update_priorities(&typed) as u64;
                write_message(&mut writer, &Message::UpdatePrioritiesReply { applied })?;
            }
            Message::Checkpoint => {
                let Some(dir) = &shared.checkpoint_dir else {
                    write_message(
                        &mut writer,
                        &Message::Error {
                            code: ErrorCode::InvalidArgument,
                            detail: "checkpointing disabled: no checkpoint_dir configured".into(),
                        },
                    )?;
                    continue;
                };
                match checkpoint::save(
                    dir,
                    &shared.all_tables(),
                    &shared.store,
                    shared.checkpoint_keep,
                ) {
                    Ok(id) => write_message(&mut writer, &Message::CheckpointReply { id })?,
                    Err(e) => write_message(
                        &mut writer,
                        &Message::Error {
                            code: ErrorCode::Internal,
                            detail: e.to_string(),
                        },
                    )?,
                }
            }
            Message::ServerInfoRequest => {
                let mut tables: Vec<WireTableInfo> = shared
                    .tables
                    .values()
                    .map(|t| {
                        let info = t.info();
                        WireTableInfo {
                            name: info.name,
                            size: info.size,
                            max_size: info.max_size,
                            max_times_sampled: info.max_times_sampled,
                            sampler: info.sampler.code(),
                            remover: info.remover.code(),
                            inserts: info.inserts,
                            samples: info.samples,
                            deletes: info.deletes,
                        }
                    })
                    .collect();
                tables.sort_by(|a, b| a.name.cmp(&b.name));
                write_message(&mut writer, &Message::ServerInfoReply { tables })?;
            }
            other => {
                write_message(
                    &mut writer,
                    &Message::Error {
                        code: ErrorCode::InvalidArgument,
                        detail: format!("unexpected client message tag {:#04x}", other.encode()[0]),
                    },
                )?;
                break Ok(());
            }
        }
    };

    // Stream-held refs for chunks no item ever referenced (or that sit
    // above the retirement watermark) are dropped with the connection.
    for (_, server_key) in state.chunk_map.drain() {
        shared.store.release_ref(server_key);
    }
    result
}

/// Credit window shared between the response writer and the ack reader.
struct Window {
    credits: Mutex<u64>,
    cond: Condvar,
    closed: AtomicBool,
}

fn serve_sample_stream(
    reader: BufReader<TcpStream>,
    mut writer: BufWriter<TcpStream>,
    table: Arc<Table>,
    shared: &Shared,
    max_in_flight: u32,
    num_samples: i64,
    timeout_ms: i64,
) -> Result<(), WireError> {
    let window = Arc::new(Window {
        credits: Mutex::new(u64::from(max_in_flight)),
        cond: Condvar::new(),
        closed: AtomicBool::new(false),
    });

    // Acks arrive while responses are being produced; a dedicated reader
    // keeps the window current without blocking the sampling loop.
    let ack_window = Arc::clone(&window);
    let max_frame = shared.max_frame_bytes;
    let ack_thread = std::thread::Builder::new()
        .name("replay-acks".into())
        .spawn(move || {
            let mut reader = reader;
            loop {
                match read_message(&mut reader, max_frame) {
                    Ok(Message::SampleAck { credits }) => {
                        let mut held = ack_window.credits.lock().unwrap();
                        *held += u64::from(credits);
                        assert!(
                            *held <= u64::from(max_in_flight),
                            "client acked more than was in flight"
                        );
                        ack_window.cond.notify_all();
                    }
                    Ok(_) | Err(_) => {
                        ack_window.closed.store(true, Ordering::SeqCst);
                        ack_window.cond.notify_all();
                        break;
                    }
                }
            }
        })
        .expect("spawn ack thread");

    let timeout = if timeout_ms < 0 {
        None
    } else {
        Some(Duration::from_millis(timeout_ms as u64))
    };
    let mut remaining = num_samples;
    let result = loop {
        if remaining == 0 {
            break write_message(&mut writer, &Message::EndOfData);
        }
        // Take one credit; at most max_in_flight responses are unacked.
        {
            let mut credits = window.credits.lock().unwrap();
            while *credits == 0 && !window.closed.load(Ordering::SeqCst) {
                credits = window.cond.wait(credits).unwrap();
            }
            if window.closed.load(Ordering::SeqCst) {
                break Ok(());
            }
            *credits -= 1;
        }
        let batch = match table.sample(1, timeout) {
            Ok(batch) => batch,
            Err(e) => {
                break write_message(
                    &mut writer,
                    &Message::Error {
                        code: ErrorCode::Internal,
                        detail: e.to_string(),
                    },
                );
            }
        };
        if let Some(item) = batch.items.into_iter().next() {
            let sample = WireSample {
                key: item.key.0,
                priority: item.priority,
                times_sampled: item.times_sampled,
                probability: item.probability,
                table_size: item.table_size,
                offset: item.offset,
                length: item.length,
                chunks: item.chunks.iter().map(|c| (**c).clone()).collect(),
            };
            if let Err(e) = write_message(&mut writer, &Message::SampleResponse(sample)) {
                break Err(e);
            }
            if remaining > 0 {
                remaining -= 1;
            }
        } else if batch.end_of_data {
            // Table timeout: the stream ends cleanly.
            break write_message(&mut writer, &Message::EndOfData);
        }
    };

    window.closed.store(true, Ordering::SeqCst);
    let _ = writer.flush();
    // Half-close only: a full shutdown here would reset the connection
    // while the client still has unread responses buffered, and the reset
    // discards them. The FIN tells the client the stream is complete; the
    // ack reader then drains until the client closes its side.
    let _ = writer.get_ref().shutdown(std::net::Shutdown::Write);
    let drain_deadline = Instant::now() + Duration::from_secs(10);
    while !ack_thread.is_finished() && Instant::now() < drain_deadline {
        std::thread::sleep(Duration::from_millis(5));
    }
    // A client that never closes its side gets cut off so the handler
    // thread cannot leak.
    let _ = writer.get_ref().shutdown(std::net::Shutdown::Both);
    drop(writer);
    let _ = ack_thread.join();
    result
}
