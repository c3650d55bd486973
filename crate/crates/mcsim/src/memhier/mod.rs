//! Memory hierarchy: cycle-level cache models, the coherence protocols that
//! keep them consistent, and an exhaustive checker for those protocols.
//!
//! Four interchangeable backends implement [`MemBackend`]:
//!
//! * **perfect** — every access completes in the L1 latency; the contention-
//!   free baseline for speedup studies.
//! * **disabled** — every access pays the full memory latency.
//! * **snoopy** — private L1s kept coherent by MESI over a shared bus;
//!   transactions snoop atomically at grant time.
//! * **directory** — private L1s kept coherent by an MSI directory (S is
//!   granted where the snoopy variant would grant E) whose messages travel
//!   the configured on-chip network; the directory and LLC sit at node 0.
//!
//! Values live in one flat word-addressed store. Stores are applied to it at
//! their coherence serialization point (write-permission grant), and fills
//! snapshot the block at the supplier, so the value a load returns is exactly
//! the value of the last store serialized before it — the model checker in
//! [`check`] proves that property over every interleaving, and the cycle
//! model inherits it by sharing the protocol tables in [`protocol`].
//!
//! Latency model: L1 hits cost `l1_lat`; misses travel the interconnect and
//! pay `llc_lat` when the LLC presence set (a set-associative LRU image used
//! only for classification) holds the block, `mem_lat` when it does not, and
//! nothing extra when another core's cache supplies the block directly.

pub mod check;
pub mod protocol;

use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use thiserror::Error;

use crate::isa::{Addr, Word};
use crate::noc::{Dest, Network, NodeId, Topology};
use protocol::{
    CacheLine, Completed, CoreReq, DirLine, Mesi, Msg, ReqOutcome, Send, SnoopLine, SnoopTxn, To,
};

/// Instruction fetches address this region: `ICODE_BASE + pc * 4`. It is
/// never written, so instruction caches need no coherence traffic.
pub const ICODE_BASE: Addr = 0x1000_0000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MemMode {
    Perfect,
    Disabled,
    Snoopy,
    Directory,
}

impl fmt::Display for MemMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MemMode::Perfect => write!(f, "perfect"),
            MemMode::Disabled => write!(f, "disabled"),
            MemMode::Snoopy => write!(f, "snoopy"),
            MemMode::Directory => write!(f, "directory"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MemConfig {
    pub mode: MemMode,
    pub block_words: usize,
    pub l1_sets: usize,
    pub l1_ways: usize,
    pub l1i_sets: usize,
    pub l1i_ways: usize,
    pub llc_sets: usize,
    pub llc_ways: usize,
    pub l1_lat: u64,
    pub llc_lat: u64,
    pub mem_lat: u64,
    /// Transport for directory traffic (the snoopy variant always uses its
    /// logical bus, regardless of this setting).
    pub topology: Topology,
    pub link_lat: u64,
    pub queue_depth: usize,
    /// Bus occupancy per snoopy transaction.
    pub bus_lat: u64,
}

impl Default for MemConfig {
    fn default() -> Self {
        MemConfig {
            mode: MemMode::Snoopy,
            block_words: 16,
            l1_sets: 64,
            l1_ways: 4,
            l1i_sets: 64,
            l1i_ways: 4,
            llc_sets: 256,
            llc_ways: 8,
            l1_lat: 1,
            llc_lat: 10,
            mem_lat: 60,
            topology: Topology::Mesh { w: 2, h: 2 },
            link_lat: 1,
            queue_depth: 8,
            bus_lat: 2,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum MemError {
    #[error("memory config: {0}")]
    BadConfig(String),
    #[error("trace line {line}: {msg}")]
    BadTrace { line: usize, msg: String },
}

impl MemConfig {
    pub fn validate(&self, cores: usize) -> Result<(), MemError> {
        let bad = |m: String| Err(MemError::BadConfig(m));
        if cores == 0 {
            return bad("need at least one core".into());
        }
        if self.block_words == 0 || !self.block_words.is_power_of_two() {
            return bad(format!("block_words must be a power of two, got {}", self.block_words));
        }
        for (name, v) in [
            ("l1_sets", self.l1_sets),
            ("l1_ways", self.l1_ways),
            ("l1i_sets", self.l1i_sets),
            ("l1i_ways", self.l1i_ways),
            ("llc_sets", self.llc_sets),
            ("llc_ways", self.llc_ways),
            ("queue_depth", self.queue_depth),
        ] {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        if self.l1_lat == 0 || self.link_lat == 0 || self.bus_lat == 0 {
            return bad("latencies must be at least 1".into());
        }
        if self.mem_lat < self.llc_lat {
            return bad(format!(
                "mem_lat ({}) must be at least llc_lat ({})",
                self.mem_lat, self.llc_lat
            ));
        }
        if self.mode == MemMode::Directory && self.topology.nodes() < cores {
            return bad(format!(
                "topology has {} nodes but {} cores need places",
                self.topology.nodes(),
                cores
            ));
        }
        Ok(())
    }

    fn block_bytes(&self) -> u64 {
        self.block_words as u64 * 4
    }

    fn block_of(&self, addr: Addr) -> u64 {
        addr as u64 / self.block_bytes()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccessKind {
    Load,
    Store,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemReq {
    pub kind: AccessKind,
    pub addr: Addr,
    /// Store data; ignored for loads.
    pub data: Word,
    /// Echoed in the completion for the caller's bookkeeping.
    pub tag: u64,
}

/// Where an access was served from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ServiceClass {
    L1Hit,
    Llc,
    Mem,
    /// Another core's cache forwarded the block.
    Owner,
}

impl fmt::Display for ServiceClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ServiceClass::L1Hit => write!(f, "l1"),
            ServiceClass::Llc => write!(f, "llc"),
            ServiceClass::Mem => write!(f, "mem"),
            ServiceClass::Owner => write!(f, "owner"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemDone {
    pub core: usize,
    pub kind: AccessKind,
    pub addr: Addr,
    /// Load result; stores echo the stored value.
    pub value: Word,
    pub tag: u64,
    pub class: ServiceClass,
}

/// The port cannot accept a request this cycle; retry later.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Busy;

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CoreMemStats {
    pub loads: u64,
    pub stores: u64,
    pub l1_hits: u64,
    pub llc_fills: u64,
    pub mem_fills: u64,
    pub owner_fills: u64,
    pub writebacks: u64,
    pub invalidations: u64,
    pub ifetches: u64,
    pub ifetch_misses: u64,
}

impl CoreMemStats {
    pub fn accesses(&self) -> u64 {
        self.loads + self.stores
    }

    pub fn misses(&self) -> u64 {
        self.llc_fills + self.mem_fills + self.owner_fills
    }

    pub fn miss_rate(&self) -> f64 {
        if self.accesses() == 0 {
            0.0
        } else {
            self.misses() as f64 / self.accesses() as f64
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MemStats {
    pub core: Vec<CoreMemStats>,
    pub bus_txns: u64,
    pub net_messages: u64,
    pub net_avg_latency: f64,
    pub net_max_latency: u64,
    /// Message latencies bucketed per [`crate::noc::LAT_EDGES`].
    pub net_hist: [u64; crate::noc::LAT_BUCKETS],
    /// Single-writer/multiple-reader violations observed at runtime; always
    /// zero unless the simulator itself is broken.
    pub swmr_violations: u64,
}

/// Uniform interface over all hierarchy backends. One outstanding data
/// access per core; instruction fetch is a synchronous latency query since
/// code is read-only.
pub trait MemBackend {
    fn request(&mut self, core: usize, req: MemReq) -> Result<(), Busy>;
    fn busy(&self, core: usize) -> bool;
    /// Advance one cycle; returns accesses completing this cycle.
    fn tick(&mut self) -> Vec<MemDone>;
    /// Stall cycles to fetch the instruction block at `addr` (0 = L1I hit).
    fn ifetch(&mut self, core: usize, addr: Addr) -> u64;
    fn flat(&self) -> &BTreeMap<Addr, Word>;
    fn load_init(&mut self, image: &BTreeMap<Addr, Word>);
    fn stats(&self) -> &MemStats;
    fn now(&self) -> u64;
}

pub fn make_backend(cfg: &MemConfig, cores: usize) -> Result<Box<dyn MemBackend>, MemError> {
    cfg.validate(cores)?;
    Ok(match cfg.mode {
        MemMode::Perfect => Box::new(FixedLatBackend::new(cfg, cores, cfg.l1_lat)),
        MemMode::Disabled => Box::new(FixedLatBackend::new(cfg, cores, cfg.mem_lat)),
        MemMode::Snoopy => Box::new(SnoopyBackend::new(cfg, cores)),
        MemMode::Directory => Box::new(DirectoryBackend::new(cfg, cores)),
    })
}

fn read_word(flat: &BTreeMap<Addr, Word>, addr: Addr) -> Word {
    *flat.get(&(addr & !3)).unwrap_or(&0)
}

fn write_word(flat: &mut BTreeMap<Addr, Word>, addr: Addr, val: Word) {
    flat.insert(addr & !3, val);
}

fn snapshot(flat: &BTreeMap<Addr, Word>, block: u64, block_words: usize) -> Vec<Word> {
    let base = block * block_words as u64 * 4;
    (0..block_words).map(|i| read_word(flat, (base + i as u64 * 4) as Addr)).collect()
}

fn word_in_block(payload: &[Word], addr: Addr, block_words: usize) -> Word {
    payload[(addr as usize % (block_words * 4)) / 4]
}

/// Set-associative LRU presence tracker (tags only, no data).
#[derive(Debug, Clone)]
struct SetLru {
    sets: Vec<VecDeque<u64>>,
    ways: usize,
}

impl SetLru {
    fn new(sets: usize, ways: usize) -> Self {
        SetLru { sets: vec![VecDeque::new(); sets], ways }
    }

    fn set_of(&self, block: u64) -> usize {
        (block % self.sets.len() as u64) as usize
    }

    /// True if present (refreshes recency); false installs it, evicting LRU.
    fn touch(&mut self, block: u64) -> bool {
        let s = self.set_of(block);
        let set = &mut self.sets[s];
        if let Some(i) = set.iter().position(|&b| b == block) {
            set.remove(i);
            set.push_back(block);
            true
        } else {
            if set.len() >= self.ways {
                set.pop_front();
            }
            set.push_back(block);
            false
        }
    }

    /// LRU victim if the set is full and `block` absent.
    fn victim_for(&self, block: u64) -> Option<u64> {
        let set = &self.sets[self.set_of(block)];
        if set.iter().any(|&b| b == block) || set.len() < self.ways {
            None
        } else {
            set.front().copied()
        }
    }

    fn insert(&mut self, block: u64) {
        let s = self.set_of(block);
        debug_assert!(!self.sets[s].iter().any(|&b| b == block));
        debug_assert!(self.sets[s].len() < self.ways);
        self.sets[s].push_back(block);
    }

    fn promote(&mut self, block: u64) {
        let s = self.set_of(block);
        if let Some(i) = self.sets[s].iter().position(|&b| b == block) {
            let b = self.sets[s].remove(i).unwrap();
            self.sets[s].push_back(b);
        }
    }

    fn remove(&mut self, block: u64) {
        let s = self.set_of(block);
        if let Some(i) = self.sets[s].iter().position(|&b| b == block) {
            self.sets[s].remove(i);
        }
    }
}

/// Completion calendar keyed by cycle; FIFO within a cycle for determinism.
#[derive(Debug)]
struct Calendar<T> {
    due: BTreeMap<u64, Vec<T>>,
}

impl<T> Default for Calendar<T> {
    fn default() -> Self {
        Calendar { due: BTreeMap::new() }
    }
}

impl<T> Calendar<T> {
    fn push(&mut self, at: u64, item: T) {
        self.due.entry(at).or_default().push(item);
    }

    fn pop_due(&mut self, now: u64) -> Vec<T> {
        let mut out = Vec::new();
        let keys: Vec<u64> = self.due.range(..=now).map(|(&k, _)| k).collect();
        for k in keys {
            out.extend(self.due.remove(&k).unwrap());
        }
        out
    }

}

// ------------------------------------------------------- fixed-latency modes

/// Perfect caches (latency = L1 hit) or no caches (latency = memory), with
/// per-core ports but no interconnect contention.
struct FixedLatBackend {
    lat: u64,
    l1_lat: u64,
    ifetch_lat: u64,
    flat: BTreeMap<Addr, Word>,
    ports: Vec<bool>,
    cal: Calendar<MemDone>,
    now: u64,
    stats: MemStats,
}

impl FixedLatBackend {
    fn new(cfg: &MemConfig, cores: usize, lat: u64) -> Self {
        FixedLatBackend {
            lat,
            l1_lat: cfg.l1_lat,
            ifetch_lat: if lat == cfg.l1_lat { 0 } else { cfg.mem_lat },
            flat: BTreeMap::new(),
            ports: vec![false; cores],
            cal: Calendar::default(),
            now: 0,
            stats: MemStats { core: vec![CoreMemStats::default(); cores], ..Default::default() },
        }
    }
}

impl MemBackend for FixedLatBackend {
    fn request(&mut self, core: usize, req: MemReq) -> Result<(), Busy> {
        if self.ports[core] {
            return Err(Busy);
        }
        self.ports[core] = true;
        let value = match req.kind {
            AccessKind::Load => {
                self.stats.core[core].loads += 1;
                read_word(&self.flat, req.addr)
            }
            AccessKind::Store => {
                self.stats.core[core].stores += 1;
                write_word(&mut self.flat, req.addr, req.data);
                req.data
            }
        };
        let class = if self.lat == self.l1_lat { ServiceClass::L1Hit } else { ServiceClass::Mem };
        if class == ServiceClass::L1Hit {
            self.stats.core[core].l1_hits += 1;
        } else {
            self.stats.core[core].mem_fills += 1;
        }
        self.cal.push(
            self.now + self.lat,
            MemDone { core, kind: req.kind, addr: req.addr, value, tag: req.tag, class },
        );
        Ok(())
    }

    fn busy(&self, core: usize) -> bool {
        self.ports[core]
    }

    fn tick(&mut self) -> Vec<MemDone> {
        self.now += 1;
        let done = self.cal.pop_due(self.now);
        for d in &done {
            self.ports[d.core] = false;
        }
        done
    }

    fn ifetch(&mut self, core: usize, _addr: Addr) -> u64 {
        self.stats.core[core].ifetches += 1;
        if self.ifetch_lat > 0 {
            self.stats.core[core].ifetch_misses += 1;
        }
        self.ifetch_lat
    }

    fn flat(&self) -> &BTreeMap<Addr, Word> {
        &self.flat
    }

    fn load_init(&mut self, image: &BTreeMap<Addr, Word>) {
        self.flat = image.clone();
    }

    fn stats(&self) -> &MemStats {
        &self.stats
    }

    fn now(&self) -> u64 {
        self.now
    }
}

// ----------------------------------------------------------- snoopy backend

#[derive(Debug, Clone, Copy)]
enum AfterGrant {
    Fill(MemReq),
    /// Writeback first, then start `next`.
    Evict { next: MemReq },
}

#[derive(Debug, Clone, Copy)]
struct SnoopPend {
    txn: SnoopTxn,
    block: u64,
    after: AfterGrant,
}

struct SnoopyBackend {
    cfg: MemConfig,
    lines: Vec<BTreeMap<u64, SnoopLine<()>>>,
    l1_lru: Vec<SetLru>,
    l1i: Vec<SetLru>,
    llc: SetLru,
    pending: Vec<Option<SnoopPend>>,
    bus_free_at: u64,
    bus_rr: usize,
    flat: BTreeMap<Addr, Word>,
    cal: Calendar<MemDone>,
    now: u64,
    stats: MemStats,
}

impl SnoopyBackend {
    fn new(cfg: &MemConfig, cores: usize) -> Self {
        SnoopyBackend {
            cfg: cfg.clone(),
            lines: vec![BTreeMap::new(); cores],
            l1_lru: vec![SetLru::new(cfg.l1_sets, cfg.l1_ways); cores],
            l1i: vec![SetLru::new(cfg.l1i_sets, cfg.l1i_ways); cores],
            llc: SetLru::new(cfg.llc_sets, cfg.llc_ways),
            pending: vec![None; cores],
            bus_free_at: 0,
            bus_rr: 0,
            flat: BTreeMap::new(),
            cal: Calendar::default(),
            now: 0,
            stats: MemStats { core: vec![CoreMemStats::default(); cores], ..Default::default() },
        }
    }

    fn swmr_check(&mut self, block: u64) {
        let mut exclusive = 0;
        let mut readers = 0;
        for l in &self.lines {
            if let Some(line) = l.get(&block) {
                if line.state.is_exclusive() {
                    exclusive += 1;
                } else if line.state.can_read() {
                    readers += 1;
                }
            }
        }
        if exclusive > 1 || (exclusive == 1 && readers > 0) {
            self.stats.swmr_violations += 1;
        }
    }

    /// Begin an access, assuming the port is free. May enqueue a writeback
    /// ahead of the real transaction.
    fn begin(&mut self, core: usize, req: MemReq) {
        let block = self.cfg.block_of(req.addr);
        let core_op = match req.kind {
            AccessKind::Load => CoreReq::Load,
            AccessKind::Store => CoreReq::Store,
        };
        let line = self.lines[core].entry(block).or_default();
        match line.core_req(core_op) {
            ReqOutcome::Done(_) => {
                // L1 hit (store may have silently upgraded E to M).
                self.l1_lru[core].promote(block);
                let value = match req.kind {
                    AccessKind::Load => {
                        self.stats.core[core].loads += 1;
                        read_word(&self.flat, req.addr)
                    }
                    AccessKind::Store => {
                        self.stats.core[core].stores += 1;
                        write_word(&mut self.flat, req.addr, req.data);
                        req.data
                    }
                };
                self.stats.core[core].l1_hits += 1;
                self.cal.push(
                    self.now + self.cfg.l1_lat,
                    MemDone {
                        core,
                        kind: req.kind,
                        addr: req.addr,
                        value,
                        tag: req.tag,
                        class: ServiceClass::L1Hit,
                    },
                );
                self.swmr_check(block);
            }
            ReqOutcome::Issued(_) => {
                let txn = self.lines[core][&block].queued_txn().expect("transaction queued");
                // Make room before the fill if the set is full.
                if let Some(victim) = self.l1_lru[core].victim_for(block) {
                    // Undo the optimistic transition; evict first, then retry.
                    let line = self.lines[core].get_mut(&block).unwrap();
                    *line = SnoopLine::default();
                    self.lines[core].remove(&block);
                    let vline = self.lines[core].get_mut(&victim).expect("victim resident");
                    match vline.core_req(CoreReq::Evict) {
                        ReqOutcome::Done(_) => {
                            // Clean victim: silent drop, start over.
                            self.lines[core].remove(&victim);
                            self.l1_lru[core].remove(victim);
                            self.begin(core, req);
                        }
                        ReqOutcome::Issued(_) => {
                            self.pending[core] = Some(SnoopPend {
                                txn: SnoopTxn::PutM,
                                block: victim,
                                after: AfterGrant::Evict { next: req },
                            });
                        }
                        ReqOutcome::Stall => unreachable!("victims are stable"),
                    }
                    return;
                }
                self.l1_lru[core].touch(block);
                self.pending[core] =
                    Some(SnoopPend { txn, block, after: AfterGrant::Fill(req) });
            }
            ReqOutcome::Stall => unreachable!("port guarantees a stable line"),
        }
    }

    /// Grant `core`'s pending transaction: atomic snoop across all caches.
    fn grant(&mut self, core: usize) {
        let SnoopPend { txn, block, after } = self.pending[core].take().expect("pending txn");
        self.stats.bus_txns += 1;
        let mut shared = false;
        let mut owner_supplied = false;
        for o in 0..self.lines.len() {
            if o == core {
                continue;
            }
            if let Some(line) = self.lines[o].get_mut(&block) {
                let was_putm = matches!(self.pending[o], Some(p) if p.block == block && p.txn == SnoopTxn::PutM);
                let r = line.snoop_other(txn);
                shared |= r.keeps_copy;
                if r.supplied.is_some() {
                    owner_supplied = true;
                    self.llc.touch(block);
                    self.stats.core[o].writebacks += 1;
                }
                if matches!(txn, SnoopTxn::GetM) && !r.keeps_copy {
                    self.stats.core[o].invalidations += 1;
                }
                if r.cancel_putm && was_putm {
                    // The remote request retired this core's writeback: its
                    // eviction is complete, start its follow-up access.
                    let p = self.pending[o].take().unwrap();
                    self.lines[o].remove(&block);
                    self.l1_lru[o].remove(block);
                    if let AfterGrant::Evict { next } = p.after {
                        self.begin(o, next);
                    }
                }
                if !self.lines[o].get(&block).map(|l| l.state != Mesi::I).unwrap_or(false) {
                    self.lines[o].remove(&block);
                    self.l1_lru[o].remove(block);
                }
            }
        }
        match txn {
            SnoopTxn::PutM => {
                self.llc.touch(block);
                self.lines[core].get_mut(&block).unwrap().own_grant(SnoopTxn::PutM, shared, None);
                self.lines[core].remove(&block);
                self.l1_lru[core].remove(block);
                self.stats.core[core].writebacks += 1;
                if let AfterGrant::Evict { next } = after {
                    self.begin(core, next);
                }
            }
            SnoopTxn::GetS | SnoopTxn::GetM => {
                let req = match after {
                    AfterGrant::Fill(r) => r,
                    AfterGrant::Evict { .. } => unreachable!("evictions ride PutM"),
                };
                let (class, extra) = if owner_supplied {
                    self.stats.core[core].owner_fills += 1;
                    (ServiceClass::Owner, self.cfg.llc_lat)
                } else if self.llc.touch(block) {
                    self.stats.core[core].llc_fills += 1;
                    (ServiceClass::Llc, self.cfg.llc_lat)
                } else {
                    self.stats.core[core].mem_fills += 1;
                    (ServiceClass::Mem, self.cfg.mem_lat)
                };
                let line = self.lines[core].get_mut(&block).expect("requester resident");
                let value = match line.own_grant(txn, shared, Some(())) {
                    Completed::Load(()) => {
                        self.stats.core[core].loads += 1;
                        read_word(&self.flat, req.addr)
                    }
                    Completed::StorePermission => {
                        self.stats.core[core].stores += 1;
                        write_word(&mut self.flat, req.addr, req.data);
                        self.lines[core].get_mut(&block).unwrap().write(());
                        req.data
                    }
                    Completed::EvictDone => unreachable!(),
                };
                self.cal.push(
                    self.now + self.cfg.bus_lat + extra,
                    MemDone { core, kind: req.kind, addr: req.addr, value, tag: req.tag, class },
                );
                self.swmr_check(block);
            }
        }
    }
}

impl MemBackend for SnoopyBackend {
    fn request(&mut self, core: usize, req: MemReq) -> Result<(), Busy> {
        if self.busy(core) {
            return Err(Busy);
        }
        self.begin(core, req);
        Ok(())
    }

    fn busy(&self, core: usize) -> bool {
        self.pending[core].is_some()
            || self.cal.due.values().flatten().any(|d| d.core == core)
    }

    fn tick(&mut self) -> Vec<MemDone> {
        self.now += 1;
        if self.now >= self.bus_free_at {
            let n = self.pending.len();
            for k in 0..n {
                let c = (self.bus_rr + k) % n;
                if self.pending[c].is_some() {
                    self.bus_rr = c + 1;
                    self.bus_free_at = self.now + self.cfg.bus_lat;
                    self.grant(c);
                    break;
                }
            }
        }
        self.cal.pop_due(self.now)
    }

    fn ifetch(&mut self, core: usize, addr: Addr) -> u64 {
        self.stats.core[core].ifetches += 1;
        let block = self.cfg.block_of(addr);
        if self.l1i[core].touch(block) {
            0
        } else {
            self.stats.core[core].ifetch_misses += 1;
            if self.llc.touch(block) {
                self.cfg.llc_lat
            } else {
                self.cfg.mem_lat
            }
        }
    }

    fn flat(&self) -> &BTreeMap<Addr, Word> {
        &self.flat
    }

    fn load_init(&mut self, image: &BTreeMap<Addr, Word>) {
        self.flat = image.clone();
    }

    fn stats(&self) -> &MemStats {
        &self.stats
    }

    fn now(&self) -> u64 {
        self.now
    }
}

// -------------------------------------------------------- directory backend

#[derive(Debug, Clone, PartialEq, Eq)]
struct NetMsg {
    from: usize,
    to: To,
    block: u64,
    msg: Msg<Vec<Word>>,
    /// Classification hint riding on Data replies.
    class: Option<ServiceClass>,
}

#[derive(Debug, Clone)]
enum DPort {
    Idle,
    /// Dirty victim writeback in flight; `next` starts on EvictDone.
    Evict { next: MemReq },
    Fill { req: MemReq, class: Option<ServiceClass> },
}

struct DirectoryBackend {
    cfg: MemConfig,
    lines: Vec<BTreeMap<u64, CacheLine<Vec<Word>>>>,
    l1_lru: Vec<SetLru>,
    l1i: Vec<SetLru>,
    llc: SetLru,
    dirs: BTreeMap<u64, DirLine<Vec<Word>>>,
    net: Network<NetMsg>,
    ports: Vec<DPort>,
    delayed: Calendar<(usize, NetMsg)>,
    cal: Calendar<MemDone>,
    flat: BTreeMap<Addr, Word>,
    now: u64,
    stats: MemStats,
}

/// The directory/LLC controller sits at this network node.
const DIR_NODE: NodeId = 0;
const FROM_DIR: usize = usize::MAX;

impl DirectoryBackend {
    fn new(cfg: &MemConfig, cores: usize) -> Self {
        let net = Network::new(cfg.topology, cfg.link_lat, cfg.queue_depth)
            .expect("validated topology");
        DirectoryBackend {
            cfg: cfg.clone(),
            lines: vec![BTreeMap::new(); cores],
            l1_lru: vec![SetLru::new(cfg.l1_sets, cfg.l1_ways); cores],
            l1i: vec![SetLru::new(cfg.l1i_sets, cfg.l1i_ways); cores],
            llc: SetLru::new(cfg.llc_sets, cfg.llc_ways),
            dirs: BTreeMap::new(),
            net,
            ports: vec![DPort::Idle; cores],
            delayed: Calendar::default(),
            cal: Calendar::default(),
            flat: BTreeMap::new(),
            now: 0,
            stats: MemStats { core: vec![CoreMemStats::default(); cores], ..Default::default() },
        }
    }

    fn node_of(&self, core: usize) -> NodeId {
        core % self.net.topology().nodes()
    }

    fn swmr_check(&mut self, block: u64) {
        let mut exclusive = 0;
        let mut readers = 0;
        for l in &self.lines {
            if let Some(line) = l.get(&block) {
                if line.state.is_exclusive() {
                    exclusive += 1;
                } else if line.state.can_read() {
                    readers += 1;
                }
            }
        }
        if exclusive > 1 || (exclusive == 1 && readers > 0) {
            self.stats.swmr_violations += 1;
        }
    }

    fn inject(&mut self, from_node: NodeId, m: NetMsg) {
        let to_node = match m.to {
            To::Dir => DIR_NODE,
            To::Cache(c) => self.node_of(c),
        };
        self.net.inject(from_node, Dest::Node(to_node), m).expect("valid nodes");
    }

    fn send_from_cache(&mut self, core: usize, block: u64, sends: Vec<Send<Vec<Word>>>) {
        for Send { to, msg } in sends {
            let m = NetMsg { from: core, to, block, msg, class: None };
            self.inject(self.node_of(core), m);
        }
    }

    /// Directory output: Data replies pick up the LLC/memory classification
    /// and are delayed by the extra memory latency when the LLC lacks the
    /// block.
    fn send_from_dir(&mut self, block: u64, sends: Vec<Send<Vec<Word>>>) {
        for Send { to, msg } in sends {
            let mut class = None;
            let mut delay = 0;
            if matches!(msg, Msg::Data { .. }) {
                if self.llc.touch(block) {
                    class = Some(ServiceClass::Llc);
                } else {
                    class = Some(ServiceClass::Mem);
                    delay = self.cfg.mem_lat - self.cfg.llc_lat;
                }
            }
            let m = NetMsg { from: FROM_DIR, to, block, msg, class };
            if delay > 0 {
                self.delayed.push(self.now + delay, (DIR_NODE, m));
            } else {
                self.inject(DIR_NODE, m);
            }
        }
    }

    fn begin(&mut self, core: usize, req: MemReq) {
        let block = self.cfg.block_of(req.addr);
        let core_op = match req.kind {
            AccessKind::Load => CoreReq::Load,
            AccessKind::Store => CoreReq::Store,
        };
        let resident = self.lines[core].contains_key(&block);
        if !resident {
            if let Some(victim) = self.l1_lru[core].victim_for(block) {
                let vline = self.lines[core].get_mut(&victim).expect("victim resident");
                debug_assert!(vline.state.is_stable(), "victims are stable");
                match vline.core_req(CoreReq::Evict) {
                    ReqOutcome::Done(_) => {
                        self.lines[core].remove(&victim);
                        self.l1_lru[core].remove(victim);
                    }
                    ReqOutcome::Issued(sends) => {
                        self.send_from_cache(core, victim, sends);
                        self.ports[core] = DPort::Evict { next: req };
                        return;
                    }
                    ReqOutcome::Stall => unreachable!("victims are stable"),
                }
            }
        }
        let line = self.lines[core].entry(block).or_default();
        match line.core_req(core_op) {
            ReqOutcome::Done(_) => {
                self.l1_lru[core].promote(block);
                let value = match req.kind {
                    AccessKind::Load => {
                        self.stats.core[core].loads += 1;
                        read_word(&self.flat, req.addr)
                    }
                    AccessKind::Store => {
                        self.stats.core[core].stores += 1;
                        write_word(&mut self.flat, req.addr, req.data);
                        let snap = snapshot(&self.flat, block, self.cfg.block_words);
                        self.lines[core].get_mut(&block).unwrap().write(snap);
                        req.data
                    }
                };
                self.stats.core[core].l1_hits += 1;
                self.cal.push(
                    self.now + self.cfg.l1_lat,
                    MemDone {
                        core,
                        kind: req.kind,
                        addr: req.addr,
                        value,
                        tag: req.tag,
                        class: ServiceClass::L1Hit,
                    },
                );
            }
            ReqOutcome::Issued(sends) => {
                if !resident {
                    self.l1_lru[core].insert(block);
                } else {
                    self.l1_lru[core].promote(block);
                }
                self.send_from_cache(core, block, sends);
                self.ports[core] = DPort::Fill { req, class: None };
            }
            ReqOutcome::Stall => {
                // The line is transient under a remote-initiated transition;
                // with one port per core this cannot happen.
                unreachable!("port guarantees a stable line")
            }
        }
    }

    fn deliver_to_cache(&mut self, core: usize, m: NetMsg) {
        let block = m.block;
        let from = m.from;
        if matches!(m.msg, Msg::Inv { .. }) {
            self.stats.core[core].invalidations += 1;
        }
        if let Some(c) = m.class {
            if let DPort::Fill { ref mut class, .. } = self.ports[core] {
                class.get_or_insert(c);
            }
        }
        let line = self.lines[core].entry(block).or_default();
        let step = line.msg(from, m.msg).expect("protocol verified by model checking");
        match step.completed {
            Some(Completed::Load(payload)) => {
                let (req, class) = match std::mem::replace(&mut self.ports[core], DPort::Idle) {
                    DPort::Fill { req, class } => (req, class),
                    other => panic!("load completion without a fill port: {other:?}"),
                };
                // The payload is the block at the load's serialization point;
                // for fills that were invalidated mid-flight it is the only
                // correct source.
                let value = word_in_block(&payload, req.addr, self.cfg.block_words);
                let class = class.unwrap_or(ServiceClass::Owner);
                self.bump_fill_stats(core, class);
                self.stats.core[core].loads += 1;
                self.cal.push(
                    self.now,
                    MemDone { core, kind: req.kind, addr: req.addr, value, tag: req.tag, class },
                );
                if self.lines[core].get(&block).map(|l| l.state == Mesi::I).unwrap_or(false) {
                    self.lines[core].remove(&block);
                    self.l1_lru[core].remove(block);
                }
            }
            Some(Completed::StorePermission) => {
                let (req, class) = match std::mem::replace(&mut self.ports[core], DPort::Idle) {
                    DPort::Fill { req, class } => (req, class),
                    other => panic!("store completion without a fill port: {other:?}"),
                };
                write_word(&mut self.flat, req.addr, req.data);
                let snap = snapshot(&self.flat, block, self.cfg.block_words);
                self.lines[core].get_mut(&block).unwrap().write(snap);
                let class = class.unwrap_or(ServiceClass::Owner);
                self.bump_fill_stats(core, class);
                self.stats.core[core].stores += 1;
                self.cal.push(
                    self.now,
                    MemDone {
                        core,
                        kind: req.kind,
                        addr: req.addr,
                        value: req.data,
                        tag: req.tag,
                        class,
                    },
                );
                // A forward parked during the fill replays now.
                if let Some((df, dm)) = self.lines[core].get_mut(&block).unwrap().take_deferred()
                {
                    let step2 = self.lines[core]
                        .get_mut(&block)
                        .unwrap()
                        .msg(df, dm)
                        .expect("protocol verified by model checking");
                    self.send_from_cache(core, block, step2.sends);
                }
            }
            Some(Completed::EvictDone) => {
                self.stats.core[core].writebacks += 1;
                self.lines[core].remove(&block);
                self.l1_lru[core].remove(block);
                let next = match std::mem::replace(&mut self.ports[core], DPort::Idle) {
                    DPort::Evict { next } => next,
                    other => panic!("evict completion without an evict port: {other:?}"),
                };
                self.begin(core, next);
            }
            None => {}
        }
        self.send_from_cache(core, block, step.sends);
        if self.lines[core].get(&block).map(|l| l.state == Mesi::I && l.pending().is_none())
            == Some(true)
        {
            self.lines[core].remove(&block);
            self.l1_lru[core].remove(block);
        }
        self.swmr_check(block);
    }

    fn bump_fill_stats(&mut self, core: usize, class: ServiceClass) {
        match class {
            ServiceClass::L1Hit => self.stats.core[core].l1_hits += 1,
            ServiceClass::Llc => self.stats.core[core].llc_fills += 1,
            ServiceClass::Mem => self.stats.core[core].mem_fills += 1,
            ServiceClass::Owner => self.stats.core[core].owner_fills += 1,
        }
    }
}

impl MemBackend for DirectoryBackend {
    fn request(&mut self, core: usize, req: MemReq) -> Result<(), Busy> {
        if self.busy(core) {
            return Err(Busy);
        }
        self.begin(core, req);
        Ok(())
    }

    fn busy(&self, core: usize) -> bool {
        !matches!(self.ports[core], DPort::Idle)
            || self.cal.due.values().flatten().any(|d| d.core == core)
    }

    fn tick(&mut self) -> Vec<MemDone> {
        self.now += 1;
        for (node, m) in self.delayed.pop_due(self.now) {
            self.inject(node, m);
        }
        let deliveries = self.net.deliver_cycle();
        for d in deliveries {
            let m = d.payload;
            match m.to {
                To::Dir => {
                    let block = m.block;
                    let bw = self.cfg.block_words;
                    let entry = self
                        .dirs
                        .entry(block)
                        .or_insert_with(|| DirLine::new(snapshot(&self.flat, block, bw)));
                    let sends =
                        entry.msg(m.from, m.msg).expect("protocol verified by model checking");
                    self.send_from_dir(block, sends);
                }
                To::Cache(c) => self.deliver_to_cache(c, m),
            }
        }
        let ns = self.net.stats();
        self.stats.net_messages = ns.delivered;
        self.stats.net_avg_latency = ns.avg_latency();
        self.stats.net_max_latency = ns.max_latency;
        self.stats.net_hist = ns.latency_hist;
        self.cal.pop_due(self.now)
    }

    fn ifetch(&mut self, core: usize, addr: Addr) -> u64 {
        self.stats.core[core].ifetches += 1;
        let block = self.cfg.block_of(addr);
        if self.l1i[core].touch(block) {
            0
        } else {
            self.stats.core[core].ifetch_misses += 1;
            if self.llc.touch(block) {
                self.cfg.llc_lat
            } else {
                self.cfg.mem_lat
            }
        }
    }

    fn flat(&self) -> &BTreeMap<Addr, Word> {
        &self.flat
    }

    fn load_init(&mut self, image: &BTreeMap<Addr, Word>) {
        self.flat = image.clone();
    }

    fn stats(&self) -> &MemStats {
        &self.stats
    }

    fn now(&self) -> u64 {
        self.now
    }
}

// -------------------------------------------------------------- trace replay

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceOp {
    pub core: usize,
    pub kind: AccessKind,
    pub addr: Addr,
    /// Store value (`st` lines only).
    pub value: Word,
}

/// Parse `core op addr [value]` lines: `0 ld 0x40`, `1 st 0x44 7`.
/// `#` starts a comment.
pub fn parse_mem_trace(src: &str) -> Result<Vec<TraceOp>, MemError> {
    let mut ops = Vec::new();
    for (i, raw) in src.lines().enumerate() {
        let line = i + 1;
        let text = raw.split('#').next().unwrap_or("").trim();
        if text.is_empty() {
            continue;
        }
        let mut parts = text.split_whitespace();
        let bad = |msg: &str| MemError::BadTrace { line, msg: msg.to_string() };
        let core: usize = parts
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| bad("want core number"))?;
        let kind = match parts.next() {
            Some("ld") => AccessKind::Load,
            Some("st") => AccessKind::Store,
            other => return Err(bad(&format!("want ld|st, got {other:?}"))),
        };
        let addr_tok = parts.next().ok_or_else(|| bad("want address"))?;
        let addr = parse_u32(addr_tok).ok_or_else(|| bad("bad address"))?;
        if addr % 4 != 0 {
            return Err(bad("address must be word-aligned"));
        }
        let value = match (kind, parts.next()) {
            (AccessKind::Store, Some(v)) => {
                parse_u32(v).map(|u| u as Word).ok_or_else(|| bad("bad store value"))?
            }
            (AccessKind::Store, None) => return Err(bad("store needs a value")),
            (AccessKind::Load, None) => 0,
            (AccessKind::Load, Some(_)) => return Err(bad("load takes no value")),
        };
        if parts.next().is_some() {
            return Err(bad("trailing tokens"));
        }
        ops.push(TraceOp { core, kind, addr, value });
    }
    Ok(ops)
}

fn parse_u32(tok: &str) -> Option<u32> {
    if let Some(hex) = tok.strip_prefix("0x").or_else(|| tok.strip_prefix("0X")) {
        u32::from_str_radix(hex, 16).ok()
    } else if let Some(neg) = tok.strip_prefix('-') {
        neg.parse::<u32>().ok().map(|v| v.wrapping_neg())
    } else {
        tok.parse().ok()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub op: TraceOp,
    pub value: Word,
    pub latency: u64,
    pub class: ServiceClass,
}

/// Replay accesses one at a time (each completes before the next issues) and
/// report per-access latency and service class.
pub fn run_mem_trace(
    cfg: &MemConfig,
    cores: usize,
    ops: &[TraceOp],
) -> Result<(Vec<TraceRow>, MemStats), MemError> {
    for (i, op) in ops.iter().enumerate() {
        if op.core >= cores {
            return Err(MemError::BadTrace {
                line: i + 1,
                msg: format!("core {} out of range ({} cores)", op.core, cores),
            });
        }
    }
    let mut be = make_backend(cfg, cores)?;
    let mut rows = Vec::new();
    for (i, &op) in ops.iter().enumerate() {
        let start = be.now();
        let req = MemReq { kind: op.kind, addr: op.addr, data: op.value, tag: i as u64 };
        while be.request(op.core, req).is_err() {
            be.tick();
        }
        let done = 'wait: loop {
            for d in be.tick() {
                if d.tag == i as u64 && d.core == op.core {
                    break 'wait d;
                }
            }
            assert!(be.now() < start + 1_000_000, "access never completed");
        };
        rows.push(TraceRow { op, value: done.value, latency: be.now() - start, class: done.class });
    }
    let stats = be.stats().clone();
    Ok((rows, stats))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg(mode: MemMode) -> MemConfig {
        MemConfig {
            mode,
            l1_sets: 2,
            l1_ways: 2,
            llc_sets: 4,
            llc_ways: 2,
            llc_lat: 4,
            mem_lat: 20,
            ..MemConfig::default()
        }
    }

    fn run_one(be: &mut dyn MemBackend, core: usize, req: MemReq) -> (MemDone, u64) {
        let start = be.now();
        while be.request(core, req).is_err() {
            be.tick();
        }
        loop {
            for d in be.tick() {
                if d.core == core && d.tag == req.tag {
                    return (d, be.now() - start);
                }
            }
            assert!(be.now() < start + 10_000, "request stuck");
        }
    }

    fn load(addr: Addr, tag: u64) -> MemReq {
        MemReq { kind: AccessKind::Load, addr, data: 0, tag }
    }

    fn store(addr: Addr, data: Word, tag: u64) -> MemReq {
        MemReq { kind: AccessKind::Store, addr, data, tag }
    }

    #[test]
    fn perfect_backend_has_flat_l1_latency() {
        let cfg = small_cfg(MemMode::Perfect);
        let mut be = make_backend(&cfg, 2).unwrap();
        let (d, lat) = run_one(be.as_mut(), 0, store(0x40, 7, 1));
        assert_eq!(lat, cfg.l1_lat);
        assert_eq!(d.class, ServiceClass::L1Hit);
        let (d, lat) = run_one(be.as_mut(), 1, load(0x40, 2));
        assert_eq!(lat, cfg.l1_lat);
        assert_eq!(d.value, 7);
    }

    #[test]
    fn disabled_backend_pays_memory_latency_every_time() {
        let cfg = small_cfg(MemMode::Disabled);
        let mut be = make_backend(&cfg, 1).unwrap();
        for tag in 0..3 {
            let (d, lat) = run_one(be.as_mut(), 0, load(0x80, tag));
            assert_eq!(lat, cfg.mem_lat);
            assert_eq!(d.class, ServiceClass::Mem);
        }
    }

    #[test]
    fn coherent_miss_then_hit_latency_ordering() {
        for mode in [MemMode::Snoopy, MemMode::Directory] {
            let cfg = small_cfg(mode);
            let mut be = make_backend(&cfg, 2).unwrap();
            let (d, cold) = run_one(be.as_mut(), 0, load(0x100, 1));
            assert_eq!(d.class, ServiceClass::Mem, "{mode}: cold miss fills from memory");
            let (d, warm) = run_one(be.as_mut(), 0, load(0x104, 2));
            assert_eq!(d.class, ServiceClass::L1Hit, "{mode}: same block hits");
            assert_eq!(warm, cfg.l1_lat);
            assert!(cold > warm, "{mode}: miss {cold} should exceed hit {warm}");
        }
    }

    #[test]
    fn values_flow_between_cores_through_coherence() {
        for mode in [MemMode::Snoopy, MemMode::Directory] {
            let cfg = small_cfg(mode);
            let mut be = make_backend(&cfg, 2).unwrap();
            run_one(be.as_mut(), 0, store(0x40, 31, 1));
            let (d, _) = run_one(be.as_mut(), 1, load(0x40, 2));
            assert_eq!(d.value, 31, "{mode}: reader sees writer's value");
            // The writer held M, so the block came from its cache.
            assert_eq!(d.class, ServiceClass::Owner, "{mode}");
            run_one(be.as_mut(), 1, store(0x40, 32, 3));
            let (d, _) = run_one(be.as_mut(), 0, load(0x40, 4));
            assert_eq!(d.value, 32, "{mode}: ping-pong back");
            assert_eq!(be.stats().swmr_violations, 0, "{mode}");
        }
    }

    #[test]
    fn second_reader_classifies_as_llc_after_owner_downgrade() {
        for mode in [MemMode::Snoopy, MemMode::Directory] {
            let cfg = small_cfg(mode);
            let mut be = make_backend(&cfg, 3).unwrap();
            run_one(be.as_mut(), 0, store(0x200, 5, 1));
            run_one(be.as_mut(), 1, load(0x200, 2)); // owner supplies, LLC freshened
            let (d, _) = run_one(be.as_mut(), 2, load(0x200, 3));
            assert_eq!(d.value, 5, "{mode}");
            assert_eq!(d.class, ServiceClass::Llc, "{mode}: supplied block now in LLC");
        }
    }

    #[test]
    fn capacity_eviction_writes_back_and_refills() {
        for mode in [MemMode::Snoopy, MemMode::Directory] {
            let cfg = small_cfg(mode); // 2 sets x 2 ways, 64B blocks
            let mut be = make_backend(&cfg, 1).unwrap();
            // Three dirty blocks mapping to set 0 (block ids 0, 2, 4).
            run_one(be.as_mut(), 0, store(0x000, 1, 1));
            run_one(be.as_mut(), 0, store(0x080, 2, 2));
            run_one(be.as_mut(), 0, store(0x100, 3, 3));
            assert_eq!(be.stats().core[0].writebacks, 1, "{mode}: LRU block written back");
            // Victim's data survives the round trip.
            let (d, _) = run_one(be.as_mut(), 0, load(0x000, 4));
            assert_eq!(d.value, 1, "{mode}");
            assert_eq!(be.stats().swmr_violations, 0, "{mode}");
        }
    }

    #[test]
    fn dirty_sharing_counts_invalidations() {
        for mode in [MemMode::Snoopy, MemMode::Directory] {
            let cfg = small_cfg(mode);
            let mut be = make_backend(&cfg, 2).unwrap();
            run_one(be.as_mut(), 0, load(0x40, 1));
            run_one(be.as_mut(), 1, load(0x40, 2));
            run_one(be.as_mut(), 0, store(0x40, 9, 3));
            assert_eq!(be.stats().core[1].invalidations, 1, "{mode}");
            let (d, _) = run_one(be.as_mut(), 1, load(0x40, 4));
            assert_eq!(d.value, 9, "{mode}");
        }
    }

    #[test]
    fn snoopy_grants_exclusive_to_lone_reader_directory_does_not() {
        let cfg = small_cfg(MemMode::Snoopy);
        let mut be = SnoopyBackend::new(&cfg, 2);
        run_one(&mut be, 0, load(0x40, 1));
        assert_eq!(be.lines[0][&1].state, Mesi::E);
        // Silent upgrade: no extra bus transaction for the store.
        let txns = be.stats().bus_txns;
        run_one(&mut be, 0, store(0x40, 1, 2));
        assert_eq!(be.stats().bus_txns, txns);
        assert_eq!(be.lines[0][&1].state, Mesi::M);

        let cfg = small_cfg(MemMode::Directory);
        let mut be = DirectoryBackend::new(&cfg, 2);
        run_one(&mut be, 0, load(0x40, 1));
        assert_eq!(be.lines[0][&1].state, Mesi::S);
    }

    #[test]
    fn ifetch_classifies_and_caches() {
        let mut cfg = small_cfg(MemMode::Snoopy);
        cfg.l1i_sets = 1;
        cfg.l1i_ways = 1;
        let mut be = make_backend(&cfg, 1).unwrap();
        let a = ICODE_BASE;
        assert_eq!(be.ifetch(0, a), cfg.mem_lat);
        assert_eq!(be.ifetch(0, a), 0);
        assert_eq!(be.ifetch(0, a + 60), 0, "same block");
        assert_eq!(be.ifetch(0, a + 64), cfg.mem_lat, "next block, cold");
        // The one-entry L1I just evicted block 0, but the LLC kept it.
        assert_eq!(be.ifetch(0, a), cfg.llc_lat);
        assert_eq!(be.stats().core[0].ifetches, 5);
        assert_eq!(be.stats().core[0].ifetch_misses, 3);
    }

    #[test]
    fn trace_replay_reports_latency_and_class() {
        let src = "\n# warm-up then share\n0 st 0x40 7\n0 ld 0x40\n1 ld 0x40\n1 st 0x40 8\n";
        let ops = parse_mem_trace(src).unwrap();
        assert_eq!(ops.len(), 4);
        let cfg = small_cfg(MemMode::Directory);
        let (rows, stats) = run_mem_trace(&cfg, 2, &ops).unwrap();
        assert_eq!(rows[0].class, ServiceClass::Mem);
        assert_eq!(rows[1].class, ServiceClass::L1Hit);
        assert_eq!(rows[1].value, 7);
        assert_eq!(rows[2].class, ServiceClass::Owner);
        assert_eq!(rows[2].value, 7);
        assert_eq!(stats.swmr_violations, 0);
        assert!(rows[0].latency > rows[1].latency);
    }

    #[test]
    fn trace_parser_rejects_malformed_lines() {
        assert!(matches!(
            parse_mem_trace("0 ld 0x41"),
            Err(MemError::BadTrace { line: 1, .. })
        ));
        assert!(matches!(
            parse_mem_trace("0 st 0x40"),
            Err(MemError::BadTrace { line: 1, .. })
        ));
        assert!(matches!(
            parse_mem_trace("x ld 0x40"),
            Err(MemError::BadTrace { line: 1, .. })
        ));
        assert!(matches!(
            parse_mem_trace("0 ld 0x40 5"),
            Err(MemError::BadTrace { line: 1, .. })
        ));
    }

    #[test]
    fn randomized_accesses_match_a_sequential_mirror() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for mode in [MemMode::Snoopy, MemMode::Directory] {
            let cfg = small_cfg(mode);
            let mut be = make_backend(&cfg, 3).unwrap();
            let mut mirror: BTreeMap<Addr, Word> = BTreeMap::new();
            for tag in 0..400u64 {
                let core = rng.gen_range(0..3);
                let addr = (rng.gen_range(0..24u32)) * 4; // few blocks, heavy sharing
                if rng.gen_bool(0.5) {
                    let v = rng.gen_range(-100..100);
                    run_one(be.as_mut(), core, store(addr, v, tag));
                    mirror.insert(addr, v);
                } else {
                    let (d, _) = run_one(be.as_mut(), core, load(addr, tag));
                    // Sequential replay: every load sees the latest store.
                    assert_eq!(d.value, *mirror.get(&addr).unwrap_or(&0), "{mode} @{addr:#x}");
                }
            }
            assert_eq!(be.stats().swmr_violations, 0, "{mode}");
            for (&a, &v) in &mirror {
                assert_eq!(read_word(be.flat(), a), v, "{mode}: final memory @{a:#x}");
            }
        }
    }

    #[test]
    fn config_validation_catches_nonsense() {
        let mut cfg = MemConfig::default();
        cfg.block_words = 3;
        assert!(cfg.validate(1).is_err());
        let mut cfg = MemConfig::default();
        cfg.mem_lat = 1;
        cfg.llc_lat = 10;
        assert!(cfg.validate(1).is_err());
        let mut cfg = MemConfig::default();
        cfg.mode = MemMode::Directory;
        cfg.topology = Topology::Line { nodes: 2 };
        assert!(cfg.validate(4).is_err());
        assert!(MemConfig::default().validate(4).is_ok());
    }

    #[test]
    fn deterministic_across_identical_runs() {
        let src = "0 st 0x40 1\n1 st 0x80 2\n0 ld 0x80\n1 ld 0x40\n2 st 0x40 3\n0 ld 0x40\n";
        let ops = parse_mem_trace(src).unwrap();
        for mode in [MemMode::Snoopy, MemMode::Directory] {
            let cfg = small_cfg(mode);
            let a = run_mem_trace(&cfg, 3, &ops).unwrap();
            let b = run_mem_trace(&cfg, 3, &ops).unwrap();
            assert_eq!(a.0, b.0, "{mode}");
            assert_eq!(a.1, b.1, "{mode}");
        }
    }
}
