//! Paged K/V cache shared by encoder (50 Hz) and decoder (12.5 Hz) caches.
//!
//! Block size is counted in decoder-rate positions. Encoder tables stretch
//! each block by the pooling factor, so one decoder step fills one decoder
//! slot and `p` encoder slots, and both kinds draw from the same pool.

use std::collections::VecDeque;
use std::sync::{Arc, Mutex};

use serde::Serialize;

use crate::cache::KvStore;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{attend_query, AttentionConfig, KvSource};

pub const DEFAULT_BLOCK_SIZE: usize = 16;
pub const DEFAULT_NUM_BLOCKS: usize = 1024;

/// Decoder-rate slot `slot` covers encoder-rate slots `[slot·p, slot·p + p)`.
pub fn expand_slot(slot: usize, p: usize) -> std::ops::Range<usize> {
    slot * p..slot * p + p
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CacheKind {
    Encoder,
    Decoder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolConfig {
    /// Decoder-rate positions per block.
    pub block_size: usize,
    pub num_blocks: usize,
    /// Floats per block for keys (and again for values).
    pub block_floats: usize,
}

impl PoolConfig {
    /// Blocks large enough for either cache kind of `cfg`.
    pub fn for_model(cfg: &ModelConfig, block_size: usize, num_blocks: usize) -> Self {
        let enc = block_size * cfg.decoder.pooling * cfg.encoder.attention().kv_dim();
        let dec = block_size * cfg.decoder.attention().kv_dim();
        Self { block_size, num_blocks, block_floats: enc.max(dec) }
    }
}

#[derive(Debug)]
struct Block {
    id: usize,
    keys: Vec<f32>,
    values: Vec<f32>,
}

impl Block {
    fn poison(&mut self) {
        self.keys.fill(f32::NAN);
        self.values.fill(f32::NAN);
    }
}

#[derive(Debug)]
struct PoolInner {
    cfg: PoolConfig,
    free: Mutex<Vec<Block>>,
}

/// Fixed-capacity block allocator; cheap to clone and share.
#[derive(Debug, Clone)]
pub struct PagedKvPool {
    inner: Arc<PoolInner>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct PoolStats {
    pub block_size: usize,
    pub total_blocks: usize,
    pub free_blocks: usize,
    pub used_blocks: usize,
}

impl PagedKvPool {
    pub fn new(cfg: PoolConfig) -> Self {
        let mut free: Vec<Block> = (0..cfg.num_blocks)
            .map(|id| Block { id, keys: vec![f32::NAN; cfg.block_floats], values: vec![f32::NAN; cfg.block_floats] })
            .collect();
        // Pop from the back hands out low ids first.
        free.reverse();
        Self { inner: Arc::new(PoolInner { cfg, free: Mutex::new(free) }) }
    }

    pub fn config(&self) -> PoolConfig {
        self.inner.cfg
    }

    pub fn free_blocks(&self) -> usize {
        self.inner.free.lock().expect("pool lock").len()
    }

    pub fn stats(&self) -> PoolStats {
        let free = self.free_blocks();
        let cfg = self.inner.cfg;
        PoolStats { block_size: cfg.block_size, total_blocks: cfg.num_blocks, free_blocks: free, used_blocks: cfg.num_blocks - free }
    }

    fn alloc(&self, session: u64) -> Result<Block> {
        self.inner.free.lock().expect("pool lock").pop().ok_or(Error::PoolExhausted { session })
    }

    fn release(&self, mut block: Block) {
        block.poison();
        self.inner.free.lock().expect("pool lock").push(block);
    }

    /// Empty table for one (session, layer, kind).
    pub fn table(&self, session: u64, kind: CacheKind, pooling: usize, width: usize) -> Result<BlockTable> {
        let p = match kind {
            CacheKind::Encoder => pooling,
            CacheKind::Decoder => 1,
        };
        let per_block = self.inner.cfg.block_size * p;
        if per_block * width > self.inner.cfg.block_floats {
            return Err(Error::Config(format!(
                "pool blocks hold {} floats, {kind:?} table needs {}",
                self.inner.cfg.block_floats,
                per_block * width
            )));
        }
        Ok(BlockTable { pool: self.clone(), session, kind, p, width, per_block, blocks: VecDeque::new(), first_block: 0, len: 0 })
    }
}

/// Ordered blocks holding one layer's K/V for one session.
#[derive(Debug)]
pub struct BlockTable {
    pool: PagedKvPool,
    session: u64,
    kind: CacheKind,
    p: usize,
    width: usize,
    /// Native-rate positions per block (`block_size · p`).
    per_block: usize,
    blocks: VecDeque<Block>,
    /// Logical index of `blocks[0]`.
    first_block: usize,
    len: usize,
}

impl BlockTable {
    pub fn kind(&self) -> CacheKind {
        self.kind
    }

    pub fn pooling(&self) -> usize {
        self.p
    }

    /// Logical length in native-rate positions.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn positions_per_block(&self) -> usize {
        self.per_block
    }

    pub fn resident_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn block_ids(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.id).collect()
    }

    /// First position still stored.
    pub fn first_resident(&self) -> usize {
        self.first_block * self.per_block
    }

    /// Physical slot of logical position `pos`.
    pub fn slot(&self, pos: usize) -> Result<usize> {
        self.check(pos)?;
        let b = &self.blocks[pos / self.per_block - self.first_block];
        Ok(b.id * self.per_block + pos % self.per_block)
    }

    fn check(&self, pos: usize) -> Result<()> {
        if pos < self.first_resident() || pos >= self.len {
            return Err(Error::TableRange { pos, start: self.first_resident(), end: self.len });
        }
        Ok(())
    }

    /// Append K/V rows for consecutive positions, allocating on demand.
    pub fn append(&mut self, keys: &[f32], values: &[f32]) -> Result<()> {
        let w = self.width;
        if keys.len() != values.len() || keys.len() % w != 0 {
            return Err(Error::Shape {
                op: "BlockTable::append",
                detail: format!("keys {} / values {} not rows of {w}", keys.len(), values.len()),
            });
        }
        for (k, v) in keys.chunks_exact(w).zip(values.chunks_exact(w)) {
            let off = self.len % self.per_block;
            if off == 0 {
                let block = self.pool.alloc(self.session)?;
                if self.blocks.is_empty() {
                    self.first_block = self.len / self.per_block;
                }
                self.blocks.push_back(block);
            }
            let b = self.blocks.back_mut().expect("tail block");
            b.keys[off * w..(off + 1) * w].copy_from_slice(k);
            b.values[off * w..(off + 1) * w].copy_from_slice(v);
            self.len += 1;
        }
        Ok(())
    }

    /// Free whole blocks whose positions all precede `first_needed`.
    pub fn evict_before(&mut self, first_needed: usize) {
        while let Some(front) = self.blocks.front() {
            let _ = front;
            let end = (self.first_block + 1) * self.per_block;
            if end > first_needed || end > self.len {
                break;
            }
            let b = self.blocks.pop_front().expect("front block");
            self.pool.release(b);
            self.first_block += 1;
        }
    }

    /// Return every block to the pool.
    pub fn clear(&mut self) {
        for b in self.blocks.drain(..) {
            self.pool.release(b);
        }
        self.first_block = self.len / self.per_block;
    }
}

impl Drop for BlockTable {
    fn drop(&mut self) {
        self.clear();
    }
}

impl KvSource for BlockTable {
    #[inline]
    fn key(&self, pos: usize) -> &[f32] {
        let b = &self.blocks[pos / self.per_block - self.first_block];
        let off = pos % self.per_block;
        &b.keys[off * self.width..(off + 1) * self.width]
    }
    #[inline]
    fn value(&self, pos: usize) -> &[f32] {
        let b = &self.blocks[pos / self.per_block - self.first_block];
        let off = pos % self.per_block;
        &b.values[off * self.width..(off + 1) * self.width]
    }
}

/// Attention indexing for one decoder step, in the table's native rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnMetadata {
    pub seq_len: usize,
    pub query_offset: usize,
    pub n_queries: usize,
}

impl AttnMetadata {
    /// Metadata after decoder step `step` (0-based), scaled by `p` for encoder tables.
    pub fn for_step(step: usize, p: usize) -> Self {
        Self { seq_len: (step + 1) * p, query_offset: step * p, n_queries: p }
    }
}

/// Attend `q` at logical position `pos` over the stored window.
pub fn paged_attention(q: &[f32], table: &BlockTable, cfg: &AttentionConfig, pos: usize) -> Result<Vec<f32>> {
    let lo = cfg.window_start(pos);
    table.check(lo)?;
    table.check(pos)?;
    if q.len() != cfg.q_dim() || table.width != cfg.kv_dim() {
        return Err(Error::Shape {
            op: "paged_attention",
            detail: format!("q {} vs {}, kv width {} vs {}", q.len(), cfg.q_dim(), table.width, cfg.kv_dim()),
        });
    }
    let mut out = vec![0.0; q.len()];
    attend_query(q, table, lo, pos, cfg, &mut out, None);
    Ok(out)
}

/// Per-layer paged tables for one cache kind of one session.
#[derive(Debug)]
pub struct PagedKv {
    tables: Vec<BlockTable>,
}

impl PagedKv {
    pub fn new(pool: &PagedKvPool, session: u64, kind: CacheKind, n_layers: usize, pooling: usize, width: usize) -> Result<Self> {
        let tables = (0..n_layers).map(|_| pool.table(session, kind, pooling, width)).collect::<Result<_>>()?;
        Ok(Self { tables })
    }

    pub fn tables(&self) -> &[BlockTable] {
        &self.tables
    }

    pub fn resident_blocks(&self) -> usize {
        self.tables.iter().map(BlockTable::resident_blocks).sum()
    }

    pub fn clear(&mut self) {
        self.tables.iter_mut().for_each(BlockTable::clear);
    }
}

impl KvStore for PagedKv {
    type Source<'a> = BlockTable;

    fn retire(&mut self, layer: usize, first_needed: usize) {
        self.tables[layer].evict_before(first_needed);
    }

    fn append(&mut self, layer: usize, key: &[f32], value: &[f32]) -> Result<()> {
        self.tables[layer].append(key, value)
    }

    fn len(&self, layer: usize) -> usize {
        self.tables[layer].len()
    }

    fn source(&self, layer: usize) -> &BlockTable {
        &self.tables[layer]
    }
}
