//! An experience replay service: tables of prioritized items backed by a
//! shared store of compressed tensor chunks, served over TCP.
//!
//! The core pieces:
//! - [`tensor`]: step structures, dtypes, and flattened signatures.
//! - [`chunk`]: column-wise batching and compression of consecutive steps.
//! - [`chunk_store`]: refcounted chunk residency shared across tables.
//! - [`selector`]: sampling/removal strategies (FIFO, LIFO, uniform, heaps,
//!   prioritized).
//! - [`rate_limiter`]: admission control coupling insert and sample rates.
//! - [`table`]: the replay table itself -- items, eviction, retirement,
//!   extensions.
//! - [`checkpoint`]: atomic on-disk snapshots of tables plus chunk data.
//! - [`wire`]: the length-prefixed binary protocol.
//! - [`server`]: thread-per-connection TCP server hosting a set of tables.
//! - [`client`]: connection handle, chunking writer, streaming sampler, and
//!   a sharded server pool.
//! - [`config`]: TOML server configuration.

mod binio;
pub mod chunk;
pub mod chunk_store;
pub mod client;
pub mod config;
pub mod checkpoint;
pub mod rate_limiter;
pub mod selector;
pub mod server;
pub mod table;
pub mod tensor;
pub mod wire;

pub use chunk::{Chunk, ChunkKey, Codec};
pub use chunk_store::ChunkStore;
pub use client::{Client, PoolWriter, Sampler, SamplerConfig, ServerPool, Writer, WriterConfig};
pub use config::ServerConfig;


pub use rate_limiter::{RateLimiter, RateLimiterConfig};
pub use selector::{SelectorConfig, SelectorKind};
pub use server::Server;

pub use table::{Item, ItemKey, SampleBatch, SampledItem, Table, TableConfig, TableInfo};
pub use tensor::{Dtype, Signature, StepStructure, StepValue, TensorValue};
