//! Load generator for the replay server: insert / sample / mixed
//! throughput over loopback, with per-second series and latency
//! percentiles.
//!
//! Numbers from this harness are desk-scale: all clients are threads on
//! one host talking over loopback, so absolute figures say nothing about
//! datacenter deployments. Ratios between runs on the same machine are
//! the meaningful output.

use rand::{Rng, SeedableRng};
use replay::client::SamplerConfig;
use replay::config::{LimiterSpec, TableSpec};
use replay::selector::SelectorConfig;
use replay::tensor::{StepStructure, TensorValue};
use replay::wire::DEFAULT_MAX_FRAME_BYTES;
use replay::{Client, Server, ServerConfig, WriterConfig};
use serde::{Deserialize, Serialize};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Insert,
    Sample,
    Mixed,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchConfig {
    pub mode: Mode,
    /// Bytes per step payload; must be a multiple of 4 (float32 tensor).
    pub payload_bytes: usize,
    pub num_clients: usize,
    pub num_tables: usize,
    pub duration_s: f64,
    pub chunk_length: usize,
    pub seed: u64,
    pub max_in_flight: u32,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            mode: Mode::Insert,
            payload_bytes: 4096,
            num_clients: 1,
            num_tables: 1,
            duration_s: 5.0,
            chunk_length: 1,
            seed: 1,
            max_in_flight: 8,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.payload_bytes == 0 || self.payload_bytes % 4 != 0 {
            return Err(format!(
                "payload_bytes must be a positive multiple of 4, got {}",
                self.payload_bytes
            ));
        }
        if self.num_clients == 0 || self.num_tables == 0 || self.chunk_length == 0 {
            return Err("clients, tables, and chunk length must be positive".into());
        }
        if !(self.duration_s > 0.0) {
            return Err("duration must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SecondRecord {
    pub second: u64,
    pub items: u64,
    pub bytes: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchResult {
    pub mode: Mode,
    pub num_clients: usize,
    pub num_tables: usize,
    pub payload_bytes: usize,
    pub duration_s: f64,
    pub total_items: u64,
    pub total_bytes: u64,
    /// Items per second over the whole run.
    pub qps: f64,
    /// Payload bytes per second over the whole run.
    pub bps: f64,
    pub per_client_items: Vec<u64>,
    pub per_second: Vec<SecondRecord>,
    pub latency_ms_p50: f64,
    pub latency_ms_p95: f64,
    pub latency_ms_p99: f64,
    /// Limiter counters reported by the server after the run, for
    /// conservation checks against the client-side totals.
    pub server_inserts: u64,
    pub server_samples: u64,
    pub max_in_flight: u32,
}

impl BenchResult {
    /// Client-counted totals must match the server's limiter counters.
    /// Inserts match exactly (writers flush before exit). Samples allow
    /// the flow-control window: the server counts a sample when it is
    /// selected, so up to max_in_flight per stream can be in flight and
    /// unconsumed when the run stops.
    pub fn conserved(&self) -> bool {
        match self.mode {
            Mode::Insert => self.total_items == self.server_inserts,
            Mode::Sample => {
                let slack = self.num_clients as u64 * (u64::from(self.max_in_flight) + 1);
                self.server_samples >= self.total_items
                    && self.server_samples - self.total_items <= slack
            }
            Mode::Mixed => true,
        }
    }
}

/// Plateau rule: doubling clients is saturated when it gains < 5% QPS.
pub fn is_saturated(qps_before_doubling: f64, qps_after_doubling: f64) -> bool {
    qps_after_doubling < qps_before_doubling * 1.05
}

pub fn table_name(index: usize) -> String {
    format!("bench_{index}")
}

/// In-process server with `num_tables` uniform/FIFO tables gated only on
/// minimum size, mirroring the throughput-benchmark setup.
pub fn spawn_inline_server(num_tables: usize, max_size: u64) -> Server {
    let tables = (0..num_tables)
        .map(|i| TableSpec {
            name: table_name(i),
            sampler: SelectorConfig::uniform(),
            remover: SelectorConfig::fifo(),
            max_size,
            max_times_sampled: 0,
            rate_limiter: LimiterSpec::MinSize { min_size: 1 },
            rng_seed: i as u64 + 1,
        })
        .collect();
    let config = ServerConfig {
        listen: "127.0.0.1:0".into(),
        checkpoint_dir: None,
        checkpoint_keep: 1,
        max_frame_bytes: DEFAULT_MAX_FRAME_BYTES,
        tables,
    };
    Server::start(config).expect("inline bench server")
}

fn random_step(rng: &mut impl Rng, payload_bytes: usize) -> StepStructure {
    let n = payload_bytes / 4;
    let values: Vec<f32> = (0..n).map(|_| rng.random::<f32>()).collect();
    StepStructure::single("payload", TensorValue::from_f32s(vec![n], &values))
}

struct ClientStats {
    items: AtomicU64,
    per_second: Vec<AtomicU64>,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let idx = ((sorted.len() as f64 - 1.0) * q).round() as usize;
    sorted[idx]
}

fn collect_result(
    config: &BenchConfig,
    endpoint: &str,
    stats: Vec<Arc<ClientStats>>,
    latencies: Vec<Vec<f64>>,
    elapsed: Duration,
) -> BenchResult {
    let per_client_items: Vec<u64> = stats.iter().map(|s| s.items.load(Ordering::Relaxed)).collect();
    let total_items: u64 = per_client_items.iter().sum();
    let total_bytes = total_items * config.payload_bytes as u64;
    let seconds = elapsed.as_secs_f64();
    let buckets = stats[0].per_second.len();
    let per_second: Vec<SecondRecord> = (0..buckets)
        .map(|sec| {
            let items: u64 = stats
                .iter()
                .map(|s| s.per_second[sec].load(Ordering::Relaxed))
                .sum();
            SecondRecord {
                second: sec as u64,
                items,
                bytes: items * config.payload_bytes as u64,
            }
        })
        .collect();
    let mut merged: Vec<f64> = latencies.into_iter().flatten().collect();
    merged.sort_by(f64::total_cmp);

    let info = Client::new(endpoint).server_info().unwrap_or_default();
    let server_inserts: u64 = info.iter().map(|t| t.inserts).sum();
    let server_samples: u64 = info.iter().map(|t| t.samples).sum();

    BenchResult {
        mode: config.mode,
        num_clients: config.num_clients,
        num_tables: config.num_tables,
        payload_bytes: config.payload_bytes,
        duration_s: seconds,
        total_items,
        total_bytes,
        qps: total_items as f64 / seconds,
        bps: total_bytes as f64 / seconds,
        per_client_items,
        per_second,
        latency_ms_p50: percentile(&merged, 0.50),
        latency_ms_p95: percentile(&merged, 0.95),
        latency_ms_p99: percentile(&merged, 0.99),
        server_inserts,
        server_samples,
        max_in_flight: config.max_in_flight,
    }
}

/// Every client thread writes random steps as fast as it can; with more
/// than one table, items round-robin across tables per create_item.
pub fn run_insert_bench(endpoint: &str, config: &BenchConfig) -> BenchResult {
    config.validate().expect("valid bench config");
    let stop = Arc::new(AtomicBool::new(false));
    let buckets = config.duration_s.ceil() as usize + 2;
    let stats: Vec<Arc<ClientStats>> = (0..config.num_clients)
        .map(|_| {
            Arc::new(ClientStats {
                items: AtomicU64::new(0),
                per_second: (0..buckets).map(|_| AtomicU64::new(0)).collect(),
            })
        })
        .collect();

    let start = Instant::now();
    let deadline = start + Duration::from_secs_f64(config.duration_s);
    let mut handles = Vec::new();
    for client_idx in 0..config.num_clients {
        let endpoint = endpoint.to_string();
        let config = config.clone();
        let stats = Arc::clone(&stats[client_idx]);
        let stop = Arc::clone(&stop);
        handles.push(std::thread::spawn(move || {
            let mut rng =
                rand_chacha::ChaCha8Rng::seed_from_u64(config.seed ^ (client_idx as u64) << 32);
            let client = Client::new(endpoint);
            let mut writer = client
                .writer(WriterConfig::new(config.chunk_length, config.chunk_length))
                .expect("writer connects");
            let mut latencies = Vec::new();
            let mut table_cursor = client_idx;
            while Instant::now() < deadline && !stop.load(Ordering::Relaxed) {
                let op_start = Instant::now();
                let step = random_step(&mut rng, config.payload_bytes);
                writer.append(step).expect("append");
                writer
                    .create_item(
                        &table_name(table_cursor % config.num_tables),
                        1,
                        rng.random::<f64>() + 0.5,
                    )
                    .expect("create_item");
                table_cursor += 1;
                latencies.push(op_start.elapsed().as_secs_f64() * 1e3);
                stats.items.fetch_add(1, Ordering::Relaxed);
                let sec = (op_start - start).as_secs() as usize;
                if sec < buckets {
                    stats.per_second[sec].fetch_add(1, Ordering::Relaxed);
                }
            }
            writer.close().expect("final flush");
            latencies
        }));
    }
    let latencies: Vec<Vec<f64>> = handles.into_iter().map(|h| h.join().unwrap()).collect();
    let elapsed = start.elapsed();
    collect_result(config, endpoint, stats, latencies, elapsed)
}

/// Fills each table with `prefill` single-step items so sampling is never
/// gated on inserts.
pub fn prefill(endpoint: &str, config: &BenchConfig, prefill: usize) {
    let client = Client::new(endpoint);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(config.seed ^ 0xfeed);
    for table_idx in 0..config.num_tables {
        let mut writer = client
            .writer(WriterConfig::new(config.chunk_length, config.chunk_length))
            .expect("writer connects");
        for _ in 0..prefill {
            writer
                .append(random_step(&mut rng, config.payload_bytes))
                .expect("append");
            writer
                .create_item(&table_name(table_idx), 1, 1.0)
                .expect("create_item");
        }
        writer.close().expect("flush");
    }
}

/// Every client thread drains a sample stream as fast as it can.
pub fn run_sample_bench(endpoint: &str, config: &BenchConfig) -> BenchResult {
    config.validate().expect("valid bench config");
    let buckets = config.duration_s.ceil() as usize + 2;
    let stats: Vec<Arc<ClientStats>> = (0..config.num_clients)
        .map(|_| {
            Arc::new(ClientStats {
                items: AtomicU64::new(0),
                per_second: (0..buckets).map(|_| AtomicU64::new(0)).collect(),
            })
        })
        .collect();

    let start = Instant::now();
    let deadline = start + Duration::from_secs_f64(config.duration_s);
    let mut handles = Vec::new();
    for client_idx in 0..config.num_clients {
        let endpoint = endpoint.to_string();
        let config = config.clone();
        let stats = Arc::clone(&stats[client_idx]);
        handles.push(std::thread::spawn(move || {
            let client = Client::new(endpoint);
            let mut sampler = client
                .sampler(SamplerConfig {
                    max_in_flight_samples_per_worker: config.max_in_flight,
                    timeout_ms: 1000,
                    ..SamplerConfig::new(table_name(client_idx % config.num_tables))
                })
                .expect("sampler connects");
            let mut latencies = Vec::new();
            while Instant::now() < deadline {
                let op_start = Instant::now();
                match sampler.next() {
                    Ok(Some(_)) => {
                        latencies.push(op_start.elapsed().as_secs_f64() * 1e3);
                        stats.items.fetch_add(1, Ordering::Relaxed);
                        let sec = (op_start - start).as_secs() as usize;
                        if sec < buckets {
                            stats.per_second[sec].fetch_add(1, Ordering::Relaxed);
                        }
                    }
                    Ok(None) => break,
                    Err(e) => panic!("sample stream failed: {e}"),
                }
            }
            latencies
        }));
    }
    let latencies: Vec<Vec<f64>> = handles.into_iter().map(|h| h.join().unwrap()).collect();
    let elapsed = start.elapsed();
    collect_result(config, endpoint, stats, latencies, elapsed)
}

/// Insert and sample clients running together, split half/half (inserts
/// get the odd remainder).
pub fn run_mixed_bench(endpoint: &str, config: &BenchConfig) -> BenchResult {
    config.validate().expect("valid bench config");
    let samplers = config.num_clients / 2;
    let inserters = config.num_clients - samplers;
    let insert_config = BenchConfig {
        num_clients: inserters,
        mode: Mode::Insert,
        ..config.clone()
    };
    let sample_config = BenchConfig {
        num_clients: samplers.max(1),
        mode: Mode::Sample,
        ..config.clone()
    };
    let e2 = endpoint.to_string();
    let sampler_handle = (samplers > 0).then(|| {
        std::thread::spawn(move || run_sample_bench(&e2, &sample_config))
    });
    let insert_result = run_insert_bench(endpoint, &insert_config);
    let sample_result = sampler_handle.map(|h| h.join().unwrap());

    let mut result = insert_result;
    result.mode = Mode::Mixed;
    result.num_clients = config.num_clients;
    if let Some(s) = sample_result {
        result.total_items += s.total_items;
        result.total_bytes += s.total_bytes;
        result.qps += s.qps;
        result.bps += s.bps;
        result.per_client_items.extend(s.per_client_items);
    }
    result
}
