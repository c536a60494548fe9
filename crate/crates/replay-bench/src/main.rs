use clap::Parser;
use replay_bench::{
    prefill, run_insert_bench, run_mixed_bench, run_sample_bench, spawn_inline_server,
    BenchConfig, BenchResult, Mode,
};
use std::io::Write;
use std::path::PathBuf;

/// Replay server load generator.
///
/// Without --endpoint an in-process server is started on loopback, so a
/// single command measures the full client/server path on one machine.
#[derive(Parser)]
#[command(name = "replay-bench", version)]
struct Args {
    #[arg(long, value_enum, default_value = "insert")]
    mode: Mode,
    /// Step payload size in bytes (float32 tensor; multiple of 4).
    #[arg(long, default_value_t = 4096)]
    payload_bytes: usize,
    /// Concurrent client threads.
    #[arg(long, default_value_t = 1)]
    clients: usize,
    /// Tables on the server; inserts round-robin across them.
    #[arg(long, default_value_t = 1)]
    tables: usize,
    /// Measurement window in seconds.
    #[arg(long, default_value_t = 5.0)]
    duration: f64,
    #[arg(long, default_value_t = 1)]
    chunk_length: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Sampler flow-control window per stream.
    #[arg(long, default_value_t = 8)]
    max_in_flight: u32,
    /// Items preloaded per table before sample/mixed runs.
    #[arg(long, default_value_t = 1000)]
    prefill: usize,
    /// Benchmark an existing server instead of an in-process one.
    #[arg(long)]
    endpoint: Option<String>,
    /// Append the result as one JSON line to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn print_summary(result: &BenchResult) {
    println!();
    println!("  mode            {:?}", result.mode);
    println!("  clients         {}", result.num_clients);
    println!("  tables          {}", result.num_tables);
    println!("  payload         {} B", result.payload_bytes);
    println!("  duration        {:.2} s", result.duration_s);
    println!("  items           {}", result.total_items);
    println!("  QPS             {:.0} items/s", result.qps);
    println!("  BPS             {:.0} bytes/s", result.bps);
    println!(
        "  latency (ms)    p50 {:.3}  p95 {:.3}  p99 {:.3}",
        result.latency_ms_p50, result.latency_ms_p95, result.latency_ms_p99
    );
    println!(
        "  conservation    client={} server_inserts={} server_samples={}",
        result.total_items, result.server_inserts, result.server_samples
    );
}

fn main() {
    let args = Args::parse();
    let config = BenchConfig {
        mode: args.mode,
        payload_bytes: args.payload_bytes,
        num_clients: args.clients,
        num_tables: args.tables,
        duration_s: args.duration,
        chunk_length: args.chunk_length,
        seed: args.seed,
        max_in_flight: args.max_in_flight,
    };
    if let Err(e) = config.validate() {
        eprintln!("invalid configuration: {e}");
        std::process::exit(1);
    }

    eprintln!(
        "note: desk-scale run (threads on one host over loopback); absolute \
         numbers are not comparable to multi-machine deployments"
    );

    let inline = args
        .endpoint
        .is_none()
        .then(|| spawn_inline_server(config.num_tables, 10_000_000));
    let endpoint = args
        .endpoint
        .clone()
        .unwrap_or_else(|| inline.as_ref().unwrap().local_addr().to_string());

    if matches!(config.mode, Mode::Sample | Mode::Mixed) {
        eprintln!("prefilling {} items per table...", args.prefill);
        prefill(&endpoint, &config, args.prefill);
    }

    let result = match config.mode {
        Mode::Insert => run_insert_bench(&endpoint, &config),
        Mode::Sample => run_sample_bench(&endpoint, &config),
        Mode::Mixed => run_mixed_bench(&endpoint, &config),
    };

    let line = serde_json::to_string(&result).expect("serializable result");
    println!("{line}");
    print_summary(&result);
    if let Some(path) = &args.out {
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .expect("open output file");
        writeln!(f, "{line}").expect("write output");
    }
}
