//! Client SDK: unary calls, the chunking [`Writer`], the prefetching
//! [`Sampler`], and the sharded [`ServerPool`].

use crate::chunk::{Chunk, ChunkError, ChunkKey, Codec};
use crate::tensor::{check_signature, Signature, StepStructure};
use crate::wire::{
    read_message, write_message, ErrorCode, Message, WireError, WireSample, WireTableInfo,
    DEFAULT_MAX_FRAME_BYTES,
};
use rand::Rng;
use std::collections::VecDeque;
use std::io::{BufReader, BufWriter};
use std::net::TcpStream;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use std::time::Duration;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("wire: {0}")]
    Wire(#[from] WireError),
    #[error("server error ({code:?}): {detail}")]
    Remote { code: ErrorCode, detail: String },
    #[error("protocol violation: {0}")]
    Protocol(&'static str),
    #[error("step rejected: {0}")]
    SignatureMismatch(String),
    #[error("{0}")]
    InvalidArgument(String),
    #[error("chunk: {0}")]
    Chunk(#[from] ChunkError),
    #[error("all endpoints unreachable after {attempts} attempts: last error: {last}")]
    Unreachable { attempts: u32, last: String },
}

/// Bounded exponential backoff with jitter for reconnects.
#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            attempts: 5,
            base_delay: Duration::from_millis(20),
            max_delay: Duration::from_secs(1),
        }
    }
}

impl RetryPolicy {
    fn delay(&self, attempt: u32) -> Duration {
        let exp = self
            .base_delay
            .saturating_mul(1u32 << attempt.min(16))
            .min(self.max_delay);
        // Full jitter: uniform in [exp/2, exp].
        let micros = exp.as_micros() as u64;
        let jittered = micros / 2 + rand::rng().random_range(0..=micros / 2);
        Duration::from_micros(jittered)
    }
}

fn connect_with_retry(endpoint: &str, policy: &RetryPolicy) -> Result<TcpStream, ClientError> {
    let mut last: Option<std::io::Error> = None;
    for attempt in 0..policy.attempts.max(1) {
        match TcpStream::connect(endpoint) {
            Ok(stream) => {
                stream.set_nodelay(true).ok();
                return Ok(stream);
            }
            Err(e) => {
                last = Some(e);
                if attempt + 1 < policy.attempts.max(1) {
                    std::thread::sleep(policy.delay(attempt));
                }
            }
        }
    }
    Err(ClientError::Unreachable {
        attempts: policy.attempts.max(1),
        last: last.map(|e| e.to_string()).unwrap_or_default(),
    })
}

fn expect_reply(msg: Message) -> Result<Message, ClientError> {
    match msg {
        Message::Error { code, detail } => Err(ClientError::Remote { code, detail }),
        other => Ok(other),
    }
}

/// Handle for one server endpoint. Unary calls open a short-lived
/// connection; writers and samplers hold their own long-lived streams.
#[derive(Debug, Clone)]
pub struct Client {
    endpoint: String,
    retry: RetryPolicy,
}

impl Client {
    pub fn new(endpoint: impl Into<String>) -> Client {
        Client {
            endpoint: endpoint.into(),
            retry: RetryPolicy::default(),
        }
    }

    pub fn with_retry(endpoint: impl Into<String>, retry: RetryPolicy) -> Client {
        Client {
            endpoint: endpoint.into(),
            retry,
        }
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    fn unary(&self, request: &Message) -> Result<Message, ClientError> {
        let stream = connect_with_retry(&self.endpoint, &self.retry)?;
        let mut writer = BufWriter::new(stream.try_clone()?);
        let mut reader = BufReader::new(stream);
        write_message(&mut writer, request)?;
        expect_reply(read_message(&mut reader, DEFAULT_MAX_FRAME_BYTES)?)
    }

    pub fn server_info(&self) -> Result<Vec<WireTableInfo>, ClientError> {
        match self.unary(&Message::ServerInfoRequest)? {
            Message::ServerInfoReply { tables } => Ok(tables),
            _ => Err(ClientError::Protocol("expected ServerInfoReply")),
        }
    }

    /// Returns the number of updates applied (unknown keys are skipped).
    pub fn update_priorities(
        &self,
        table: &str,
        updates: &[(u64, f64)],
    ) -> Result<u64, ClientError> {
        let request = Message::UpdatePriorities {
            table: table.into(),
            updates: updates.to_vec(),
        };
        match self.unary(&request)? {
            Message::UpdatePrioritiesReply { applied } => Ok(applied),
            _ => Err(ClientError::Protocol("expected UpdatePrioritiesReply")),
        }
    }

    /// Triggers a server checkpoint and returns its id.
    pub fn checkpoint(&self) -> Result<String, ClientError> {
        match self.unary(&Message::Checkpoint)? {
            Message::CheckpointReply { id } => Ok(id),
            _ => Err(ClientError::Protocol("expected CheckpointReply")),
        }
    }

    pub fn writer(&self, config: WriterConfig) -> Result<Writer, ClientError> {
        Writer::connect(&self.endpoint, &self.retry, config)
    }

    pub fn sampler(&self, config: SamplerConfig) -> Result<Sampler, ClientError> {
        Sampler::connect(vec![self.endpoint.clone()], self.retry, config)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct WriterConfig {
    /// Steps per chunk (K). Appends are buffered and shipped as one chunk
    /// every K steps; create_item flushes a short chunk when needed.
    pub chunk_length: usize,
    /// Ring depth: items may reference at most this many trailing steps.
    pub max_sequence_length: usize,
    pub codec: Codec,
    /// Cap on unacknowledged items before append/create_item block on acks.
    pub max_unacked_items: usize,
}

impl WriterConfig {
    pub fn new(chunk_length: usize, max_sequence_length: usize) -> WriterConfig {
        WriterConfig {
            chunk_length,
            max_sequence_length,
            codec: Codec::default(),
            max_unacked_items: 256,
        }
    }

    fn validate(&self) -> Result<(), ClientError> {
        if self.chunk_length == 0 || self.max_sequence_length == 0 {
            return Err(ClientError::InvalidArgument(
                "chunk_length and max_sequence_length must be positive".into(),
            ));
        }
        if self.chunk_length > self.max_sequence_length {
            return Err(ClientError::InvalidArgument(format!(
                "chunk_length {} exceeds max_sequence_length {}",
                self.chunk_length, self.max_sequence_length
            )));
        }
        Ok(())
    }
}

/// Where one appended step ended up: which stream-local chunk, which row.
#[derive(Debug, Clone, Copy)]
struct StepRef {
    chunk_key: Option<u64>,
    row: u32,
}

/// Streams steps to one server: buffers K steps per chunk, keeps a sliding
/// window of the last max_sequence_length steps referenceable, and creates
/// items over trailing steps. A chunk is transmitted exactly once no
/// matter how many items reference it.
pub struct Writer {
    config: WriterConfig,
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
    signature: Option<Signature>,
    /// Steps appended but not yet shipped in a chunk.
    buffer: Vec<StepStructure>,
    /// Placement of the last max_sequence_length steps, oldest first.
    ring: VecDeque<StepRef>,
    next_chunk_key: u64,
    items_sent: u64,
    items_confirmed: u64,
    chunks_sent: u64,
    deferred_error: Option<ClientError>,
}

impl Writer {
    fn connect(
        endpoint: &str,
        retry: &RetryPolicy,
        config: WriterConfig,
    ) -> Result<Writer, ClientError> {
        config.validate()?;
        let stream = connect_with_retry(endpoint, retry)?;
        Ok(Writer {
            config,
            reader: BufReader::new(stream.try_clone()?),
            writer: BufWriter::new(stream),
            signature: None,
            buffer: Vec::new(),
            ring: VecDeque::new(),
            next_chunk_key: 1,
            items_sent: 0,
            items_confirmed: 0,
            chunks_sent: 0,
            deferred_error: None,
        })
    }

    /// Chunks shipped so far (tests use this to count transmissions).
    pub fn chunks_sent(&self) -> u64 {
        self.chunks_sent
    }

    pub fn items_confirmed(&self) -> u64 {
        self.items_confirmed
    }

    fn check_deferred(&mut self) -> Result<(), ClientError> {
        if let Some(e) = self.deferred_error.take() {
            return Err(e);
        }
        Ok(())
    }

    /// Buffers one step; every chunk_length appends the buffer is shipped
    /// as a chunk. The first append fixes the stream's signature.
    pub fn append(&mut self, step: StepStructure) -> Result<(), ClientError> {
        self.check_deferred()?;
        match &self.signature {
            None => self.signature = Some(Signature::of(&step)),
            Some(sig) => {
                check_signature(&step, sig)
                    .map_err(|m| ClientError::SignatureMismatch(m.to_string()))?;
            }
        }
        self.ring.push_back(StepRef {
            chunk_key: None,
            row: self.buffer.len() as u32,
        });
        self.buffer.push(step);
        if self.ring.len() > self.config.max_sequence_length {
            self.ring.pop_front();
        }
        if self.buffer.len() >= self.config.chunk_length {
            self.flush_chunk()?;
        }
        Ok(())
    }

    /// Ships the buffered steps as one chunk (possibly short).
    fn flush_chunk(&mut self) -> Result<(), ClientError> {
        if self.buffer.is_empty() {
            return Ok(());
        }
        let key = self.next_chunk_key;
        self.next_chunk_key += 1;
        let signature = self.signature.as_ref().expect("buffer implies signature");
        let chunk = Chunk::build(ChunkKey(key), &self.buffer, signature, self.config.codec)?;
        write_message(&mut self.writer, &Message::InsertChunk(chunk))?;
        self.chunks_sent += 1;
        // Mark where each buffered step now lives.
        let n = self.buffer.len();
        let ring_len = self.ring.len();
        for (row, slot) in self.ring.iter_mut().skip(ring_len - n).enumerate() {
            slot.chunk_key = Some(key);
            slot.row = row as u32;
        }
        self.buffer.clear();
        Ok(())
    }

    /// Creates an item over the trailing `num_timesteps` steps. Steps still
    /// sitting in an unfinished buffer are flushed as a short chunk first.
    pub fn create_item(
        &mut self,
        table: &str,
        num_timesteps: usize,
        priority: f64,
    ) -> Result<(), ClientError> {
        self.check_deferred()?;
        if num_timesteps == 0 || num_timesteps > self.ring.len() {
            return Err(ClientError::InvalidArgument(format!(
                "item over {} steps but only {} are referenceable",
                num_timesteps,
                self.ring.len()
            )));
        }
        if !self.buffer.is_empty() {
            // The newest referenced step may be unshipped; a short flush
            // keeps per-step item creation possible at any K.
            self.flush_chunk()?;
        }
        let start = self.ring.len() - num_timesteps;
        let mut chunk_keys: Vec<u64> = Vec::new();
        for slot in self.ring.iter().skip(start) {
            let key = slot.chunk_key.expect("flushed above");
            if chunk_keys.last() != Some(&key) {
                chunk_keys.push(key);
            }
        }
        let offset = self.ring[start].row;
        write_message(
            &mut self.writer,
            &Message::CreateItem {
                table: table.into(),
                chunk_keys,
                offset,
                length: num_timesteps as u32,
                priority,
            },
        )?;
        self.items_sent += 1;
        while self.items_sent - self.items_confirmed > self.config.max_unacked_items as u64 {
            self.read_ack()?;
        }
        Ok(())
    }

    fn read_ack(&mut self) -> Result<(), ClientError> {
        match expect_reply(read_message(&mut self.reader, DEFAULT_MAX_FRAME_BYTES)?)? {
            Message::InsertAck {
                confirmed_items, ..
            } => {
                self.items_confirmed = confirmed_items;
                Ok(())
            }
            _ => Err(ClientError::Protocol("expected InsertAck")),
        }
    }

    /// Blocks until every sent item is acknowledged by the server.
    pub fn flush(&mut self) -> Result<(), ClientError> {
        self.check_deferred()?;
        while self.items_confirmed < self.items_sent {
            self.read_ack()?;
        }
        Ok(())
    }

    /// Flushes outstanding items and surfaces any deferred error.
    pub fn close(mut self) -> Result<(), ClientError> {
        self.flush()
    }
}

#[derive(Debug, Clone)]
pub struct SamplerConfig {
    pub table: String,
    pub max_in_flight_samples_per_worker: u32,
    /// Streams opened per endpoint.
    pub num_workers: usize,
    /// Per-sample server-side timeout; -1 waits forever.
    pub timeout_ms: i64,
    /// Total samples wanted across all workers; -1 means unbounded.
    pub num_samples: i64,
}

impl SamplerConfig {
    pub fn new(table: impl Into<String>) -> SamplerConfig {
        SamplerConfig {
            table: table.into(),
            max_in_flight_samples_per_worker: 8,
            num_workers: 1,
            timeout_ms: -1,
            num_samples: -1,
        }
    }

    fn validate(&self) -> Result<(), ClientError> {
        if self.max_in_flight_samples_per_worker == 0 || self.num_workers == 0 {
            return Err(ClientError::InvalidArgument(
                "max_in_flight and num_workers must be positive".into(),
            ));
        }
        if self.timeout_ms < -1 || self.num_samples < -1 {
            return Err(ClientError::InvalidArgument(
                "timeout_ms and num_samples must be >= -1".into(),
            ));
        }
        Ok(())
    }
}

/// One decoded sample: item metadata plus the exact trajectory steps.
#[derive(Debug, Clone)]
pub struct SampledTrajectory {
    pub key: u64,
    pub priority: f64,
    pub times_sampled: u32,
    pub probability: f64,
    pub table_size: u64,
    pub steps: Vec<StepStructure>,
}

fn decode_sample(sample: WireSample) -> Result<SampledTrajectory, ClientError> {
    // Rows are numbered across the chunk list in order; the item spans
    // [offset, offset + length).
    let want_start = sample.offset as usize;
    let want_end = want_start + sample.length as usize;
    let mut steps = Vec::with_capacity(sample.length as usize);
    let mut base = 0usize;
    for chunk in &sample.chunks {
        let rows = chunk.num_rows() as usize;
        let lo = want_start.max(base);
        let hi = want_end.min(base + rows);
        if lo < hi {
            steps.extend(chunk.decode_rows(lo - base, hi - lo)?);
        }
        base += rows;
    }
    if steps.len() != sample.length as usize {
        return Err(ClientError::Protocol("sample rows do not cover the item"));
    }
    Ok(SampledTrajectory {
        key: sample.key,
        priority: sample.priority,
        times_sampled: sample.times_sampled,
        probability: sample.probability,
        table_size: sample.table_size,
        steps,
    })
}

enum WorkerEvent {
    Sample(SampledTrajectory),
    Failed(ClientError),
}

/// Pulls flow-controlled sample streams from one or more endpoints and
/// merges them in arrival order. Each worker acknowledges a sample only
/// after the consumer takes it, so server-side in-flight counts track real
/// consumption.
pub struct Sampler {
    rx: mpsc::Receiver<WorkerEvent>,
    workers: Vec<std::thread::JoinHandle<()>>,
    live_workers: usize,
    failures: Vec<ClientError>,
    yielded_any: bool,
}

impl Sampler {
    fn connect(
        endpoints: Vec<String>,
        retry: RetryPolicy,
        config: SamplerConfig,
    ) -> Result<Sampler, ClientError> {
        config.validate()?;
        let total_workers = endpoints.len() * config.num_workers;
        // Hand each worker its share of a bounded sample count.
        let quotas: Vec<i64> = if config.num_samples < 0 {
            vec![-1; total_workers]
        } else {
            let n = config.num_samples as usize;
            (0..total_workers)
                .map(|i| (n / total_workers + usize::from(i < n % total_workers)) as i64)
                .collect()
        };

        let (tx, rx) = mpsc::sync_channel::<WorkerEvent>(0);
        let mut workers = Vec::new();
        let mut index = 0;
        for endpoint in &endpoints {
            for _ in 0..config.num_workers {
                let quota = quotas[index];
                index += 1;
                if quota == 0 {
                    continue;
                }
                let tx = tx.clone();
                let endpoint = endpoint.clone();
                let config = config.clone();
                let handle = std::thread::Builder::new()
                    .name("replay-sample-worker".into())
                    .spawn(move || run_sample_worker(&endpoint, &retry, &config, quota, &tx))
                    .expect("spawn sampler worker");
                workers.push(handle);
            }
        }
        drop(tx);
        let live_workers = workers.len();
        Ok(Sampler {
            rx,
            workers,
            live_workers,
            failures: Vec::new(),
            yielded_any: false,
        })
    }

    /// Next sample in arrival order. `Ok(None)` means every stream ended
    /// cleanly (end-of-data). A dead endpoint is dropped from the merge;
    /// only when every worker failed and nothing was delivered does the
    /// sampler report a transport error.
    pub fn next(&mut self) -> Result<Option<SampledTrajectory>, ClientError> {
        loop {
            match self.rx.recv() {
                Ok(WorkerEvent::Sample(sample)) => {
                    self.yielded_any = true;
                    return Ok(Some(sample));
                }
                Ok(WorkerEvent::Failed(e)) => {
                    self.live_workers -= 1;
                    self.failures.push(e);
                    if self.live_workers == 0 && !self.yielded_any {
                        return Err(self.failures.pop().expect("failure recorded"));
                    }
                }
                Err(mpsc::RecvError) => return Ok(None),
            }
        }
    }

    /// Drains the stream to completion, returning everything delivered.
    pub fn collect_all(&mut self) -> Result<Vec<SampledTrajectory>, ClientError> {
        let mut out = Vec::new();
        while let Some(s) = self.next()? {
            out.push(s);
        }
        Ok(out)
    }
}

impl Drop for Sampler {
    fn drop(&mut self) {
        // Receiver drops first; workers unblock with send errors and exit.
        // Swap in a dummy receiver so worker threads can be joined.
        let (_tx, rx) = mpsc::sync_channel(0);
        drop(std::mem::replace(&mut self.rx, rx));
        for handle in self.workers.drain(..) {
            let _ = handle.join();
        }
    }
}

fn run_sample_worker(
    endpoint: &str,
    retry: &RetryPolicy,
    config: &SamplerConfig,
    quota: i64,
    tx: &mpsc::SyncSender<WorkerEvent>,
) {
    let result = (|| -> Result<(), ClientError> {
        let stream = connect_with_retry(endpoint, retry)?;
        let mut reader = BufReader::new(stream.try_clone()?);
        let mut writer = BufWriter::new(stream);
        write_message(
            &mut writer,
            &Message::SampleRequest {
                table: config.table.clone(),
                max_in_flight: config.max_in_flight_samples_per_worker,
                num_samples: quota,
                timeout_ms: config.timeout_ms,
            },
        )?;
        loop {
            match expect_reply(read_message(&mut reader, DEFAULT_MAX_FRAME_BYTES)?)? {
                Message::SampleResponse(sample) => {
                    let decoded = decode_sample(sample)?;
                    // Blocks until the consumer takes it; only then ack.
                    if tx.send(WorkerEvent::Sample(decoded)).is_err() {
                        return Ok(()); // consumer dropped the sampler
                    }
                    write_message(&mut writer, &Message::SampleAck { credits: 1 })?;
                }
                Message::EndOfData => return Ok(()),
                _ => return Err(ClientError::Protocol("unexpected message on sample stream")),
            }
        }
    })();
    if let Err(e) = result {
        let _ = tx.send(WorkerEvent::Failed(e));
    }
}

/// A set of fully independent servers: writes are spread round-robin per
/// item, sample streams are opened against every endpoint and merged.
pub struct ServerPool {
    clients: Vec<Client>,
    cursor: AtomicUsize,
    retry: RetryPolicy,
}

impl ServerPool {
    pub fn new(endpoints: Vec<String>) -> Result<ServerPool, ClientError> {
        if endpoints.is_empty() {
            return Err(ClientError::InvalidArgument("no endpoints".into()));
        }
        let retry = RetryPolicy::default();
        Ok(ServerPool {
            clients: endpoints
                .iter()
                .map(|e| Client::with_retry(e.clone(), retry))
                .collect(),
            cursor: AtomicUsize::new(0),
            retry,
        })
    }

    pub fn num_endpoints(&self) -> usize {
        self.clients.len()
    }

    pub fn client(&self, index: usize) -> &Client {
        &self.clients[index]
    }

    pub fn writer(&self, config: WriterConfig) -> Result<PoolWriter<'_>, ClientError> {
        config.validate()?;
        Ok(PoolWriter {
            pool: self,
            config,
            writers: (0..self.clients.len()).map(|_| None).collect(),
            synced: vec![0; self.clients.len()],
            history: VecDeque::new(),
            appended: 0,
        })
    }

    /// One sampler per endpoint, merged into a single arrival-order stream.
    pub fn sample_merged(&self, config: SamplerConfig) -> Result<Sampler, ClientError> {
        Sampler::connect(
            self.clients.iter().map(|c| c.endpoint.clone()).collect(),
            self.retry,
            config,
        )
    }

    /// Broadcasts to every endpoint; unknown keys are skipped server-side,
    /// so the sum counts exactly the items that exist somewhere.
    pub fn update_priorities(
        &self,
        table: &str,
        updates: &[(u64, f64)],
    ) -> Result<u64, ClientError> {
        let mut applied = 0;
        for client in &self.clients {
            applied += client.update_priorities(table, updates)?;
        }
        Ok(applied)
    }

    pub fn checkpoint_all(&self) -> Result<Vec<String>, ClientError> {
        self.clients.iter().map(|c| c.checkpoint()).collect()
    }

    pub fn server_info(&self) -> Result<Vec<Vec<WireTableInfo>>, ClientError> {
        self.clients.iter().map(|c| c.server_info()).collect()
    }
}

/// Round-robin writer over a pool. Steps are recorded centrally; a server
/// only receives the trailing steps an item actually references, just
/// before that item is created on it.
pub struct PoolWriter<'a> {
    pool: &'a ServerPool,
    config: WriterConfig,
    writers: Vec<Option<Writer>>,
    /// Global step index (1-based count) each endpoint has received.
    synced: Vec<u64>,
    /// The last max_sequence_length appended steps.
    history: VecDeque<StepStructure>,
    appended: u64,
}

impl PoolWriter<'_> {
    pub fn append(&mut self, step: StepStructure) -> Result<(), ClientError> {
        self.history.push_back(step);
        if self.history.len() > self.config.max_sequence_length {
            self.history.pop_front();
        }
        self.appended += 1;
        Ok(())
    }

    /// Sends the item to the next endpoint in round-robin order, first
    /// forwarding whichever trailing steps that endpoint is missing.
    pub fn create_item(
        &mut self,
        table: &str,
        num_timesteps: usize,
        priority: f64,
    ) -> Result<(), ClientError> {
        if num_timesteps == 0 || num_timesteps as u64 > self.appended.min(self.history.len() as u64)
        {
            return Err(ClientError::InvalidArgument(format!(
                "item over {} steps but only {} are referenceable",
                num_timesteps,
                self.history.len()
            )));
        }
        let index = self.pool.cursor.fetch_add(1, Ordering::Relaxed) % self.writers.len();
        if self.writers[index].is_none() {
            self.writers[index] = Some(Writer::connect(
                &self.pool.clients[index].endpoint,
                &self.pool.retry,
                self.config,
            )?);
        }
        let writer = self.writers[index].as_mut().expect("created above");

        let item_start = self.appended - num_timesteps as u64;
        let send_from = self.synced[index].max(item_start);
        let history_base = self.appended - self.history.len() as u64;
        for global in send_from..self.appended {
            let step = self.history[(global - history_base) as usize].clone();
            writer.append(step)?;
        }
        self.synced[index] = self.appended;
        writer.create_item(table, num_timesteps, priority)
    }

    pub fn flush(&mut self) -> Result<(), ClientError> {
        for writer in self.writers.iter_mut().flatten() {
            writer.flush()?;
        }
        Ok(())
    }

    pub fn close(mut self) -> Result<(), ClientError> {
        self.flush()
    }
}
