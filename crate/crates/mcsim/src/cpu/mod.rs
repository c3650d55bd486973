//! Cycle-level out-of-order superscalar cores and the multicore [`System`]
//! driver that connects them to a shared memory hierarchy.
//!
//! Each [`Core`] models a classic speculative pipeline: a fetch front end
//! predicting one group per cycle ([`crate::bpred`]), register renaming onto
//! a reorder buffer, an issue window with per-class function-unit limits, a
//! load/store queue with store-to-load forwarding and memory-dependence
//! speculation, and in-order commit. Stores become visible through a
//! post-commit store buffer whose discipline is set by the consistency
//! [`Model`]: under TSO loads may bypass buffered stores (forwarding their
//! own), under SC loads wait until the buffer drains.
//!
//! Every commit is checked, instruction by instruction, against the golden
//! functional model ([`crate::isa::functional_step`]): the committed register
//! write, memory write, and next pc must match exactly, with load values
//! patched in from the memory system (whose own correctness the protocol
//! checker establishes). A divergence panics — it is a simulator bug, never
//! a program error.
//!
//! Squashes happen at commit: a mispredicted branch, a memory-order
//! violation, or a jump-register redirect flushes everything younger,
//! walks the rename map back, and restarts fetch, so the misprediction
//! penalty grows by exactly one cycle per front-end stage.
//!
//! ```
//! use mcsim::{cpu, isa, memhier};
//!
//! let prog = isa::assemble("
//!     addi r1, r0, 10
//!     addi r2, r0, 0
//!     loop: add r2, r2, r1
//!     addi r1, r1, -1
//!     bne r1, r0, loop
//!     halt
//! ").unwrap();
//! let mut sys = cpu::System::new(
//!     &prog,
//!     &cpu::CpuConfig::default(),
//!     &memhier::MemConfig { mode: memhier::MemMode::Perfect, ..Default::default() },
//! ).unwrap();
//! let run = sys.run(10_000).unwrap();
//! assert_eq!(run.state.threads[0].regs[2], 55);
//!
//! let golden = isa::functional_run(&prog, 10_000).unwrap();
//! assert_eq!(run.state.threads[0].regs, golden.state.threads[0].regs);
//! ```

use std::collections::{BTreeMap, HashSet, VecDeque};

use thiserror::Error;

use crate::bpred::{Btb, BpredError, DirectionPredictor, HistCheckpoint, PredMeta, PredictorConfig};
use crate::consistency::{Model, StoreBuffer};
use crate::isa::{
    functional_step, Addr, ArchState, Instr, Opcode, Program, StepError, ThreadState, Word,
};
use crate::memhier::{
    make_backend, AccessKind, MemBackend, MemConfig, MemDone, MemError, MemReq, MemStats,
    ICODE_BASE,
};

#[derive(Debug, Clone)]
pub struct CpuConfig {
    /// Fetch, dispatch, issue, and commit width.
    pub width: usize,
    /// Front-end stages between fetch and dispatch; each adds one cycle of
    /// misprediction penalty.
    pub fd_stages: u64,
    pub rob_size: usize,
    pub iq_size: usize,
    pub lsq_size: usize,
    /// Post-commit store buffer entries.
    pub sb_capacity: usize,
    /// Out-of-order issue; `false` restricts each cycle to the oldest
    /// contiguous run of ready instructions.
    pub ooo: bool,
    pub model: Model,
    pub bpred: PredictorConfig,
    pub btb_sets: usize,
    pub lat_int: u64,
    pub lat_mul: u64,
    /// Issue slots per cycle per class (units are fully pipelined).
    pub fu_int: usize,
    pub fu_mul: usize,
    pub fu_mem: usize,
    /// Let loads speculate past stores with unresolved addresses, guarded by
    /// a per-pc one-bit conflict predictor.
    pub mem_dep_pred: bool,
}

impl Default for CpuConfig {
    fn default() -> Self {
        CpuConfig {
            width: 4,
            fd_stages: 2,
            rob_size: 64,
            iq_size: 32,
            lsq_size: 24,
            sb_capacity: 8,
            ooo: true,
            model: Model::Tso,
            bpred: PredictorConfig::Bimodal { index_bits: 12 },
            btb_sets: 64,
            lat_int: 1,
            lat_mul: 3,
            fu_int: 4,
            fu_mul: 1,
            fu_mem: 2,
            mem_dep_pred: true,
        }
    }
}

impl CpuConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Config(m));
        if self.width == 0 {
            return bad("width must be at least 1".into());
        }
        if self.fd_stages == 0 {
            return bad("fd_stages must be at least 1".into());
        }
        if self.rob_size < self.width {
            return bad(format!(
                "rob_size ({}) must be at least the width ({})",
                self.rob_size, self.width
            ));
        }
        for (name, v) in [
            ("iq_size", self.iq_size),
            ("lsq_size", self.lsq_size),
            ("sb_capacity", self.sb_capacity),
            ("btb_sets", self.btb_sets),
            ("fu_int", self.fu_int),
            ("fu_mul", self.fu_mul),
            ("fu_mem", self.fu_mem),
        ] {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        if self.lat_int == 0 || self.lat_mul == 0 {
            return bad("latencies must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Bpred(#[from] BpredError),
    #[error(transparent)]
    Mem(#[from] MemError),
    #[error("cycle budget of {budget} exhausted")]
    Budget { budget: u64 },
    #[error("core {core} faulted: {err}")]
    Fault { core: usize, err: StepError },
    #[error("program has no threads")]
    Empty,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CoreStats {
    pub cycles: u64,
    pub committed: u64,
    pub fetched: u64,
    pub squashes: u64,
    pub cond_branches: u64,
    pub cond_mispredicts: u64,
    /// Commit-time fetch redirects of any kind (mispredicted conditionals,
    /// jump-register targets, memory-order replays).
    pub redirects: u64,
    pub loads: u64,
    pub stores: u64,
    pub load_violations: u64,
    pub ifetch_stall_cycles: u64,
    pub sb_commit_stalls: u64,
}

impl CoreStats {
    pub fn ipc(&self) -> f64 {
        if self.cycles == 0 {
            0.0
        } else {
            self.committed as f64 / self.cycles as f64
        }
    }

    pub fn branch_accuracy(&self) -> f64 {
        if self.cond_branches == 0 {
            1.0
        } else {
            1.0 - self.cond_mispredicts as f64 / self.cond_branches as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SrcOp {
    Ready(Word),
    Wait(u64),
}

impl SrcOp {
    fn value(self) -> Word {
        match self {
            SrcOp::Ready(v) => v,
            SrcOp::Wait(_) => panic!("operand not ready"),
        }
    }

    fn ready(self) -> bool {
        matches!(self, SrcOp::Ready(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum FuClass {
    Int,
    Mul,
}

#[derive(Debug, Clone, Copy)]
struct IqEntry {
    seq: u64,
    cls: FuClass,
    a: SrcOp,
    b: SrcOp,
}

#[derive(Debug, Clone, Copy)]
struct LsqEntry {
    seq: u64,
    pc: u32,
    is_store: bool,
    base: SrcOp,
    /// Store data operand; loads keep it `Ready(0)`.
    data: SrcOp,
    imm: i32,
    addr: Option<Addr>,
    /// Loads: value obtained or requested; stores: address and data known.
    executed: bool,
    /// Store seq this load forwarded from, if any.
    src_store: Option<u64>,
}

#[derive(Debug, Clone)]
struct RobEntry {
    seq: u64,
    pc: u32,
    instr: Instr,
    /// Where fetch went after this instruction; `None` means fetch stopped.
    fetched_next: Option<u32>,
    /// Conditional-branch prediction bookkeeping.
    pred: Option<(PredMeta, HistCheckpoint, bool)>,
    /// History checkpoint from before this instruction fetched, for squashes
    /// that restart at (not after) it.
    cp_before: HistCheckpoint,
    /// Previous rename mapping of `dest`, for walk-back.
    old_map: Option<(u8, Option<u64>)>,
    done: bool,
    value: Word,
    taken: bool,
    actual_next: u32,
    addr: Addr,
    store_val: Word,
    fault: Option<StepError>,
    violation: bool,
}

#[derive(Debug, Clone)]
struct FetchedInstr {
    pc: u32,
    instr: Instr,
    fetched_next: Option<u32>,
    pred: Option<(PredMeta, HistCheckpoint, bool)>,
    cp_before: HistCheckpoint,
}

#[derive(Debug, Clone)]
struct FetchGroup {
    ready_at: u64,
    instrs: VecDeque<FetchedInstr>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PortUse {
    Load(u64),
    Drain,
}

const DRAIN_TAG: u64 = u64::MAX;

/// One hardware thread's pipeline.
pub struct Core {
    tid: usize,
    cfg: CpuConfig,
    code: Vec<Instr>,
    program: Program,
    /// Golden-model shadow stepped at each commit.
    mirror: ArchState,
    regs: [Word; 32],
    map: [Option<u64>; 32],
    rob: VecDeque<RobEntry>,
    iq: Vec<IqEntry>,
    lsq: VecDeque<LsqEntry>,
    sb: StoreBuffer,
    frontend: VecDeque<FetchGroup>,
    /// Completion calendar: cycle -> (seq, dest value).
    cal: BTreeMap<u64, Vec<(u64, Option<Word>)>>,
    pred: DirectionPredictor,
    btb: Btb,
    /// Load pcs that have caused a memory-order violation; they wait for
    /// older store addresses from then on.
    dep_bits: HashSet<u32>,
    fetch_pc: Option<u32>,
    fetch_stall: u64,
    port: Option<PortUse>,
    next_seq: u64,
    now: u64,
    halted: bool,
    fault: Option<StepError>,
    pub stats: CoreStats,
}

impl Core {
    pub fn new(tid: usize, program: &Program, cfg: &CpuConfig) -> Result<Self, SimError> {
        cfg.validate()?;
        let code = program
            .threads
            .get(tid)
            .ok_or_else(|| SimError::Config(format!("no thread {tid} in program")))?
            .clone();
        Ok(Core {
            tid,
            cfg: cfg.clone(),
            code,
            program: program.clone(),
            mirror: ArchState::initial(program),
            regs: [0; 32],
            map: [None; 32],
            rob: VecDeque::new(),
            iq: Vec::new(),
            lsq: VecDeque::new(),
            sb: StoreBuffer::new(cfg.sb_capacity),
            frontend: VecDeque::new(),
            cal: BTreeMap::new(),
            pred: cfg.bpred.build()?,
            btb: Btb::new(cfg.btb_sets),
            dep_bits: HashSet::new(),
            fetch_pc: Some(0),
            fetch_stall: 0,
            port: None,
            next_seq: 0,
            now: 0,
            halted: false,
            fault: None,
            stats: CoreStats::default(),
        })
    }

    pub fn halted(&self) -> bool {
        self.halted
    }

    pub fn fault(&self) -> Option<&StepError> {
        self.fault.as_ref()
    }

    /// Halted with the store buffer drained and no access in flight.
    pub fn finished(&self) -> bool {
        self.halted && self.sb.is_empty() && self.port.is_none()
    }

    /// Architectural register/pc state, from the commit-verified mirror.
    pub fn arch_thread(&self) -> &ThreadState {
        &self.mirror.threads[self.tid]
    }

    /// Advance one cycle. `dones` are this core's completions from the
    /// shared memory backend, which the caller has already ticked.
    pub fn tick(&mut self, mem: &mut dyn MemBackend, dones: &[MemDone]) {
        self.now += 1;
        if !self.finished() {
            self.stats.cycles += 1;
        }
        self.handle_dones(dones);
        self.writeback();
        self.commit();
        self.issue(mem);
        self.dispatch();
        self.fetch(mem);
    }

    // ------------------------------------------------------------ plumbing

    fn rob_get(&mut self, seq: u64) -> Option<&mut RobEntry> {
        let head = self.rob.front()?.seq;
        let idx = seq.checked_sub(head)? as usize;
        match self.rob.get_mut(idx) {
            Some(e) if e.seq == seq => Some(e),
            _ => None,
        }
    }

    /// Broadcast a completed dest value to waiting consumers.
    fn wake(&mut self, seq: u64, value: Word) {
        for e in &mut self.iq {
            if e.a == SrcOp::Wait(seq) {
                e.a = SrcOp::Ready(value);
            }
            if e.b == SrcOp::Wait(seq) {
                e.b = SrcOp::Ready(value);
            }
        }
        for e in &mut self.lsq {
            if e.base == SrcOp::Wait(seq) {
                e.base = SrcOp::Ready(value);
            }
            if e.data == SrcOp::Wait(seq) {
                e.data = SrcOp::Ready(value);
            }
        }
    }

    fn handle_dones(&mut self, dones: &[MemDone]) {
        for d in dones {
            match d.tag {
                DRAIN_TAG => {
                    debug_assert_eq!(self.port, Some(PortUse::Drain));
                    self.port = None;
                }
                seq => {
                    debug_assert_eq!(self.port, Some(PortUse::Load(seq)));
                    self.port = None;
                    if let Some(e) = self.rob_get(seq) {
                        e.done = true;
                        e.value = d.value;
                        self.wake(seq, d.value);
                    }
                    // A missing entry means the load was squashed in flight;
                    // the completion is dropped on the floor.
                }
            }
        }
    }

    fn writeback(&mut self) {
        let due: Vec<u64> = self.cal.range(..=self.now).map(|(&k, _)| k).collect();
        for k in due {
            for (seq, val) in self.cal.remove(&k).unwrap() {
                if let Some(e) = self.rob_get(seq) {
                    e.done = true;
                    if let Some(v) = val {
                        e.value = v;
                        if e.instr.opcode.writes_dest() {
                            self.wake(seq, v);
                        }
                    }
                }
            }
        }
    }

    // -------------------------------------------------------------- commit

    fn commit(&mut self) {
        for _ in 0..self.cfg.width {
            if self.halted {
                return;
            }
            let Some(head) = self.rob.front() else { return };
            if !head.done {
                return;
            }
            let e = head.clone();

            if e.violation {
                // The load read memory before an older same-address store
                // resolved: replay from the load and stop speculating on it.
                self.stats.load_violations += 1;
                self.dep_bits.insert(e.pc);
                self.pred.restore(e.cp_before);
                self.squash_from(e.seq, Some(e.pc));
                return;
            }
            if e.fault.is_some() {
                self.verify_commit(&e);
                self.fault = e.fault.clone();
                self.halted = true;
                self.squash_from(e.seq, None);
                return;
            }
            match e.instr.opcode {
                Opcode::Fence => {
                    if !self.sb.is_empty() || self.port == Some(PortUse::Drain) {
                        return; // wait for the buffer to drain
                    }
                }
                Opcode::Store => {
                    if self.sb.is_full() {
                        self.stats.sb_commit_stalls += 1;
                        return;
                    }
                }
                _ => {}
            }

            self.verify_commit(&e);

            // Retire: apply the architectural effect.
            self.rob.pop_front();
            if let Some(front) = self.lsq.front() {
                if front.seq == e.seq {
                    self.lsq.pop_front();
                }
            }
            self.stats.committed += 1;
            if e.instr.opcode.writes_dest() && e.instr.dest != 0 {
                self.regs[e.instr.dest as usize] = e.value;
            }
            if let Some((reg, _)) = e.old_map {
                if self.map[reg as usize] == Some(e.seq) {
                    self.map[reg as usize] = None;
                }
            }
            match e.instr.opcode {
                Opcode::Store => {
                    self.stats.stores += 1;
                    self.sb.push(e.addr, e.store_val);
                }
                Opcode::Load => self.stats.loads += 1,
                Opcode::Halt => {
                    self.halted = true;
                    self.squash_from(e.seq + 1, None);
                    return;
                }
                _ => {}
            }
            if let Some((meta, cp, _)) = e.pred {
                self.stats.cond_branches += 1;
                self.pred.resolve(e.pc, meta, e.taken);
                if e.taken {
                    self.btb.update(e.pc, e.actual_next);
                }
                if e.fetched_next != Some(e.actual_next) {
                    self.stats.cond_mispredicts += 1;
                    self.pred.repair(cp, e.taken);
                }
            }
            if e.fetched_next != Some(e.actual_next) {
                self.stats.redirects += 1;
                self.squash_from(e.seq + 1, Some(e.actual_next));
                return;
            }
        }
    }

    /// Replay the committed instruction on the golden model and require an
    /// identical architectural effect. Load values are patched in from the
    /// memory system, whose coherence the protocol checker guarantees.
    fn verify_commit(&mut self, e: &RobEntry) {
        let diverged = |what: &str| {
            panic!(
                "core {} diverged from the golden model at pc {} ({}): {what}",
                self.tid, e.pc, e.instr
            )
        };
        if self.mirror.threads[self.tid].pc != e.pc {
            diverged(&format!(
                "golden pc is {}, pipeline committed pc {}",
                self.mirror.threads[self.tid].pc, e.pc
            ));
        }
        if e.instr.opcode == Opcode::Load && e.fault.is_none() {
            self.mirror.mem.insert(e.addr, e.value);
        }
        match functional_step(&mut self.mirror, &self.program, self.tid) {
            Err(g) => {
                if e.fault.as_ref() != Some(&g) {
                    diverged(&format!("golden fault {g:?}, pipeline fault {:?}", e.fault));
                }
            }
            Ok(eff) => {
                if e.fault.is_some() {
                    diverged(&format!("pipeline faulted ({:?}), golden did not", e.fault));
                }
                let ours = if e.instr.opcode.writes_dest() {
                    let v = if e.instr.dest == 0 { 0 } else { e.value };
                    Some((e.instr.dest, v))
                } else {
                    None
                };
                if eff.reg_write != ours {
                    diverged(&format!(
                        "golden wrote {:?}, pipeline wrote {ours:?}",
                        eff.reg_write
                    ));
                }
                let mem_ours = (e.instr.opcode == Opcode::Store)
                    .then_some((e.addr, e.store_val));
                if eff.mem_write != mem_ours {
                    diverged(&format!(
                        "golden stored {:?}, pipeline stored {mem_ours:?}",
                        eff.mem_write
                    ));
                }
                let golden_next = self.mirror.threads[self.tid].pc;
                if golden_next != e.actual_next {
                    diverged(&format!(
                        "golden next pc {golden_next}, pipeline computed {}",
                        e.actual_next
                    ));
                }
            }
        }
    }

    /// Flush every instruction with `seq >= first_bad`, walk the rename map
    /// back, and restart fetch at `new_fetch`.
    fn squash_from(&mut self, first_bad: u64, new_fetch: Option<u32>) {
        // Mappings older than the current head belong to already-committed
        // producers: those values live in the register file now.
        let floor = self.rob.front().map_or(u64::MAX, |e| e.seq);
        while self.rob.back().map(|e| e.seq >= first_bad) == Some(true) {
            let e = self.rob.pop_back().unwrap();
            if let Some((reg, old)) = e.old_map {
                if self.map[reg as usize] == Some(e.seq) {
                    self.map[reg as usize] = old.filter(|&s| s >= floor);
                }
            }
        }
        self.iq.retain(|e| e.seq < first_bad);
        self.lsq.retain(|e| e.seq < first_bad);
        self.frontend.clear();
        self.fetch_stall = 0;
        self.fetch_pc = new_fetch;
        self.stats.squashes += 1;
        // In-flight loads and calendar entries for squashed seqs complete
        // into the void: seqs are never reused.
    }

    // --------------------------------------------------------------- issue

    fn issue(&mut self, mem: &mut dyn MemBackend) {
        // Drain the store buffer whenever the port is free; committed stores
        // have the highest claim on memory bandwidth.
        if self.port.is_none() && !self.sb.is_empty() {
            let (addr, val) = self.sb.drain_one().expect("nonempty");
            mem.request(
                self.tid,
                MemReq { kind: AccessKind::Store, addr, data: val, tag: DRAIN_TAG },
            )
            .expect("port was free");
            self.port = Some(PortUse::Drain);
        }
        if self.halted {
            return;
        }

        let mut budget = self.cfg.width;
        let mut fu_int = self.cfg.fu_int;
        let mut fu_mul = self.cfg.fu_mul;
        let mut fu_mem = self.cfg.fu_mem;

        // Candidates in age order across both queues.
        #[derive(Clone, Copy)]
        enum Cand {
            Iq(usize),
            Lsq(usize),
        }
        let mut cands: Vec<(u64, Cand)> = self
            .iq
            .iter()
            .enumerate()
            .map(|(i, e)| (e.seq, Cand::Iq(i)))
            .chain(
                self.lsq
                    .iter()
                    .enumerate()
                    .filter(|(_, e)| !e.executed)
                    .map(|(i, e)| (e.seq, Cand::Lsq(i))),
            )
            .collect();
        cands.sort_unstable_by_key(|&(seq, _)| seq);

        let mut issued_iq: Vec<u64> = Vec::new();
        for (seq, cand) in cands {
            if budget == 0 {
                break;
            }
            let ok = match cand {
                Cand::Iq(i) => {
                    let e = self.iq[i];
                    let fu = match e.cls {
                        FuClass::Int => &mut fu_int,
                        FuClass::Mul => &mut fu_mul,
                    };
                    if e.a.ready() && e.b.ready() && *fu > 0 {
                        *fu -= 1;
                        self.exec_iq(e);
                        issued_iq.push(seq);
                        true
                    } else {
                        false
                    }
                }
                Cand::Lsq(i) => {
                    if fu_mem > 0 && self.try_exec_mem(i, mem) {
                        fu_mem -= 1;
                        true
                    } else {
                        false
                    }
                }
            };
            if ok {
                budget -= 1;
            } else if !self.cfg.ooo {
                break; // in-order: the oldest stalled instruction blocks
            }
        }
        self.iq.retain(|e| !issued_iq.contains(&e.seq));
    }

    fn exec_iq(&mut self, e: IqEntry) {
        let entry = self.rob_get(e.seq).expect("issued instr lives in the rob");
        let (instr, pc) = (entry.instr, entry.pc);
        let a = e.a.value();
        let b = e.b.value();
        let mut value = None;
        let mut taken = false;
        let mut next = pc.wrapping_add(1);
        match instr.opcode {
            Opcode::Add => value = Some(a.wrapping_add(b)),
            Opcode::Sub => value = Some(a.wrapping_sub(b)),
            Opcode::And => value = Some(a & b),
            Opcode::Or => value = Some(a | b),
            Opcode::Xor => value = Some(a ^ b),
            Opcode::Slt => value = Some((a < b) as Word),
            Opcode::Mul => value = Some(a.wrapping_mul(b)),
            Opcode::Addi => value = Some(a.wrapping_add(instr.imm)),
            Opcode::Beq => taken = a == b,
            Opcode::Bne => taken = a != b,
            Opcode::Blt => taken = a < b,
            Opcode::Jal => {
                value = Some(pc.wrapping_add(1) as Word);
                next = pc.wrapping_add_signed(instr.imm);
            }
            Opcode::Jr => next = a as u32,
            op => unreachable!("{op:?} does not issue through the int/mul queue"),
        }
        if instr.opcode.is_branch() && taken {
            next = pc.wrapping_add_signed(instr.imm);
        }
        entry.taken = taken;
        entry.actual_next = next;
        let lat = match instr.opcode {
            Opcode::Mul => self.cfg.lat_mul,
            _ => self.cfg.lat_int,
        };
        self.cal.entry(self.now + lat).or_default().push((e.seq, value));
    }

    /// Try to execute the LSQ entry at `i`; returns whether it issued.
    fn try_exec_mem(&mut self, i: usize, mem: &mut dyn MemBackend) -> bool {
        let e = self.lsq[i];
        if e.is_store {
            if !(e.base.ready() && e.data.ready()) {
                return false;
            }
            let addr = e.base.value().wrapping_add(e.imm) as Addr;
            let data = e.data.value();
            self.lsq[i].addr = Some(addr);
            self.lsq[i].executed = true;
            let fault = (addr % 4 != 0).then(|| StepError::Misaligned {
                thread: self.tid,
                pc: e.pc,
                addr,
            });
            {
                let entry = self.rob_get(e.seq).expect("store lives in the rob");
                entry.addr = addr;
                entry.store_val = data;
                entry.fault = fault.clone();
            }
            self.cal.entry(self.now + 1).or_default().push((e.seq, None));
            if fault.is_none() {
                // A younger load that already read this address without
                // forwarding from us (or someone younger) got a stale value.
                for j in 0..self.lsq.len() {
                    let l = self.lsq[j];
                    if !l.is_store
                        && l.seq > e.seq
                        && l.executed
                        && l.addr == Some(addr)
                        && l.src_store.map_or(true, |s| s < e.seq)
                    {
                        if let Some(r) = self.rob_get(l.seq) {
                            r.violation = true;
                        }
                    }
                }
            }
            return true;
        }

        // Loads execute in program order among themselves.
        let oldest_unexecuted = self
            .lsq
            .iter()
            .filter(|l| !l.is_store && !l.executed)
            .map(|l| l.seq)
            .min();
        if oldest_unexecuted != Some(e.seq) || !e.base.ready() {
            return false;
        }
        let addr = e.base.value().wrapping_add(e.imm) as Addr;
        if addr % 4 != 0 {
            self.lsq[i].addr = Some(addr);
            self.lsq[i].executed = true;
            let fault = StepError::Misaligned { thread: self.tid, pc: e.pc, addr };
            let entry = self.rob_get(e.seq).expect("load lives in the rob");
            entry.addr = addr;
            entry.fault = Some(fault);
            self.cal.entry(self.now + 1).or_default().push((e.seq, None));
            return true;
        }

        // A fence in flight orders every younger load behind it.
        let fence_ahead = self
            .rob
            .iter()
            .any(|r| r.instr.opcode == Opcode::Fence && r.seq < e.seq);
        if fence_ahead {
            return false;
        }
        let older_stores: Vec<LsqEntry> = self
            .lsq
            .iter()
            .filter(|s| s.is_store && s.seq < e.seq)
            .copied()
            .collect();
        match self.cfg.model {
            Model::Sc => {
                // SC: a load waits until every older store in the window has
                // committed and drained to memory.
                if !older_stores.is_empty()
                    || !self.sb.is_empty()
                    || self.port == Some(PortUse::Drain)
                {
                    return false;
                }
            }
            Model::Tso => {
                let unresolved = older_stores.iter().any(|s| !s.executed);
                if unresolved && !(self.cfg.mem_dep_pred && !self.dep_bits.contains(&e.pc)) {
                    return false;
                }
            }
        }

        // Newest older store to the same address forwards its data.
        if let Some(s) = older_stores
            .iter()
            .rev()
            .find(|s| s.executed && s.addr == Some(addr))
        {
            let entry = self.rob_get(e.seq).expect("load lives in the rob");
            entry.addr = addr;
            self.lsq[i].addr = Some(addr);
            self.lsq[i].executed = true;
            self.lsq[i].src_store = Some(s.seq);
            let data = s.data.value();
            self.cal.entry(self.now + 1).or_default().push((e.seq, Some(data)));
            return true;
        }
        // TSO: committed-but-undrained stores forward from the buffer.
        if self.cfg.model == Model::Tso {
            if let Some(v) = self.sb.forward(addr) {
                let entry = self.rob_get(e.seq).expect("load lives in the rob");
                entry.addr = addr;
                self.lsq[i].addr = Some(addr);
                self.lsq[i].executed = true;
                self.cal.entry(self.now + 1).or_default().push((e.seq, Some(v)));
                return true;
            }
        }
        if self.port.is_some() {
            return false;
        }
        mem.request(
            self.tid,
            MemReq { kind: AccessKind::Load, addr, data: 0, tag: e.seq },
        )
        .expect("port was free");
        self.port = Some(PortUse::Load(e.seq));
        let entry = self.rob_get(e.seq).expect("load lives in the rob");
        entry.addr = addr;
        self.lsq[i].addr = Some(addr);
        self.lsq[i].executed = true;
        true
    }

    // ------------------------------------------------------------ dispatch

    fn src_op(&mut self, r: u8) -> SrcOp {
        if r == 0 {
            return SrcOp::Ready(0);
        }
        match self.map[r as usize] {
            None => SrcOp::Ready(self.regs[r as usize]),
            Some(tag) => {
                let e = self.rob_get(tag).expect("mapped producer lives in the rob");
                if e.done {
                    SrcOp::Ready(e.value)
                } else {
                    SrcOp::Wait(tag)
                }
            }
        }
    }

    fn dispatch(&mut self) {
        if self.halted {
            return;
        }
        let mut budget = self.cfg.width;
        while budget > 0 {
            let Some(group) = self.frontend.front_mut() else { return };
            if group.ready_at > self.now {
                return;
            }
            let Some(fi) = group.instrs.front().cloned() else {
                self.frontend.pop_front();
                continue;
            };
            if self.rob.len() >= self.cfg.rob_size {
                return;
            }
            let op = fi.instr.opcode;
            let needs_iq = !matches!(op, Opcode::Load | Opcode::Store | Opcode::Fence | Opcode::Halt);
            if needs_iq && self.iq.len() >= self.cfg.iq_size {
                return;
            }
            if op.is_mem() && self.lsq.len() >= self.cfg.lsq_size {
                return;
            }
            let group = self.frontend.front_mut().unwrap();
            group.instrs.pop_front();
            // Drop exhausted groups immediately so they never hold a
            // front-end slot against fetch.
            if group.instrs.is_empty() {
                self.frontend.pop_front();
            }

            let seq = self.next_seq;
            self.next_seq += 1;
            let mut entry = RobEntry {
                seq,
                pc: fi.pc,
                instr: fi.instr,
                fetched_next: fi.fetched_next,
                pred: fi.pred,
                cp_before: fi.cp_before,
                old_map: None,
                done: false,
                value: 0,
                taken: false,
                actual_next: fi.pc.wrapping_add(1),
                addr: 0,
                store_val: 0,
                fault: None,
                violation: false,
            };
            match op {
                Opcode::Halt => {
                    entry.done = true;
                    entry.actual_next = fi.pc;
                }
                Opcode::Fence => entry.done = true,
                Opcode::Load => {
                    let base = self.src_op(fi.instr.src1);
                    self.lsq.push_back(LsqEntry {
                        seq,
                        pc: fi.pc,
                        is_store: false,
                        base,
                        data: SrcOp::Ready(0),
                        imm: fi.instr.imm,
                        addr: None,
                        executed: false,
                        src_store: None,
                    });
                }
                Opcode::Store => {
                    let data = self.src_op(fi.instr.src1);
                    let base = self.src_op(fi.instr.src2);
                    self.lsq.push_back(LsqEntry {
                        seq,
                        pc: fi.pc,
                        is_store: true,
                        base,
                        data,
                        imm: fi.instr.imm,
                        addr: None,
                        executed: false,
                        src_store: None,
                    });
                }
                _ => {
                    let srcs = fi.instr.sources();
                    let a = srcs.first().map_or(SrcOp::Ready(0), |&r| self.src_op(r));
                    let b = srcs.get(1).map_or(SrcOp::Ready(0), |&r| self.src_op(r));
                    let cls = if op == Opcode::Mul { FuClass::Mul } else { FuClass::Int };
                    self.iq.push(IqEntry { seq, cls, a, b });
                }
            }
            if op.writes_dest() && fi.instr.dest != 0 {
                let d = fi.instr.dest as usize;
                entry.old_map = Some((fi.instr.dest, self.map[d]));
                self.map[d] = Some(seq);
            }
            self.rob.push_back(entry);
            budget -= 1;
        }
    }

    // --------------------------------------------------------------- fetch

    fn fetch(&mut self, mem: &mut dyn MemBackend) {
        if self.halted {
            return;
        }
        if self.fetch_stall > 0 {
            self.fetch_stall -= 1;
            self.stats.ifetch_stall_cycles += 1;
            return;
        }
        if self.frontend.len() >= self.cfg.fd_stages as usize {
            return;
        }
        let Some(start_pc) = self.fetch_pc else { return };
        if start_pc as usize >= self.code.len() {
            return; // off the end of the program on a wrong path
        }
        let stall = mem.ifetch(
            self.tid,
            ICODE_BASE.wrapping_add((self.tid as u32) << 20).wrapping_add(start_pc * 4),
        );
        if stall > 0 {
            self.fetch_stall = stall;
            return;
        }

        let mut instrs = VecDeque::new();
        let mut pc = start_pc;
        for _ in 0..self.cfg.width {
            let Some(&instr) = self.code.get(pc as usize) else { break };
            let cp_before = self.pred.checkpoint();
            let mut fi = FetchedInstr {
                pc,
                instr,
                fetched_next: Some(pc.wrapping_add(1)),
                pred: None,
                cp_before,
            };
            match instr.opcode {
                Opcode::Halt => {
                    fi.fetched_next = None;
                    instrs.push_back(fi);
                    self.fetch_pc = None;
                    self.stats.fetched += instrs.len() as u64;
                    self.frontend
                        .push_back(FetchGroup { ready_at: self.now + self.cfg.fd_stages, instrs });
                    return;
                }
                Opcode::Jr => {
                    fi.fetched_next = None;
                    instrs.push_back(fi);
                    self.fetch_pc = None;
                    self.stats.fetched += instrs.len() as u64;
                    self.frontend
                        .push_back(FetchGroup { ready_at: self.now + self.cfg.fd_stages, instrs });
                    return;
                }
                Opcode::Jal => {
                    let target = pc.wrapping_add_signed(instr.imm);
                    fi.fetched_next = Some(target);
                    instrs.push_back(fi);
                    self.fetch_pc = Some(target);
                    self.stats.fetched += instrs.len() as u64;
                    self.frontend
                        .push_back(FetchGroup { ready_at: self.now + self.cfg.fd_stages, instrs });
                    return;
                }
                Opcode::Beq | Opcode::Bne | Opcode::Blt => {
                    let l = self.pred.lookup(pc);
                    let target = self.btb.lookup(pc);
                    fi.pred = Some((l.meta, l.checkpoint, l.taken));
                    if l.taken {
                        if let Some(t) = target {
                            fi.fetched_next = Some(t);
                            instrs.push_back(fi);
                            self.fetch_pc = Some(t);
                            self.stats.fetched += instrs.len() as u64;
                            self.frontend.push_back(FetchGroup {
                                ready_at: self.now + self.cfg.fd_stages,
                                instrs,
                            });
                            return;
                        }
                        // Predicted taken but target unknown: fall through
                        // and let commit redirect if it really was taken.
                    }
                    instrs.push_back(fi);
                    pc = pc.wrapping_add(1);
                }
                _ => {
                    instrs.push_back(fi);
                    pc = pc.wrapping_add(1);
                }
            }
        }
        if !instrs.is_empty() {
            self.fetch_pc = Some(pc);
            self.stats.fetched += instrs.len() as u64;
            self.frontend
                .push_back(FetchGroup { ready_at: self.now + self.cfg.fd_stages, instrs });
        }
    }
}

// ------------------------------------------------------------------ system

/// All cores plus the shared memory hierarchy; one [`Core`] per program
/// thread.
pub struct System {
    pub cores: Vec<Core>,
    pub mem: Box<dyn MemBackend>,
    pub cycles: u64,
}

#[derive(Debug, Clone)]
pub struct SystemRun {
    /// Final architectural state (canonicalized), assembled from the
    /// commit-verified mirrors and drained memory.
    pub state: ArchState,
    pub cycles: u64,
    pub core_stats: Vec<CoreStats>,
    pub mem_stats: MemStats,
}

impl System {
    pub fn new(program: &Program, cpu: &CpuConfig, mem: &MemConfig) -> Result<Self, SimError> {
        if program.threads.is_empty() {
            return Err(SimError::Empty);
        }
        cpu.validate()?;
        let cores_n = program.threads.len();
        let mut backend = make_backend(mem, cores_n)?;
        backend.load_init(&program.init_data);
        let cores = (0..cores_n)
            .map(|tid| Core::new(tid, program, cpu))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(System { cores, mem: backend, cycles: 0 })
    }

    pub fn finished(&self) -> bool {
        self.cores.iter().all(|c| c.finished())
    }

    pub fn tick(&mut self) {
        self.cycles += 1;
        let dones = self.mem.tick();
        for (i, core) in self.cores.iter_mut().enumerate() {
            let mine: Vec<MemDone> = dones.iter().filter(|d| d.core == i).copied().collect();
            core.tick(self.mem.as_mut(), &mine);
        }
    }

    /// Run until every core halts and drains, at most `budget` cycles.
    pub fn run(&mut self, budget: u64) -> Result<SystemRun, SimError> {
        while !self.finished() {
            if self.cycles >= budget {
                return Err(SimError::Budget { budget });
            }
            self.tick();
            for (i, c) in self.cores.iter().enumerate() {
                if let Some(err) = c.fault() {
                    return Err(SimError::Fault { core: i, err: err.clone() });
                }
            }
        }
        Ok(self.result())
    }

    /// Snapshot the architectural state and statistics so far.
    pub fn result(&self) -> SystemRun {
        let mut state = ArchState {
            threads: self.cores.iter().map(|c| c.arch_thread().clone()).collect(),
            mem: self.mem.flat().clone(),
        };
        state.canonicalize();
        SystemRun {
            state,
            cycles: self.cycles,
            core_stats: self.cores.iter().map(|c| c.stats).collect(),
            mem_stats: self.mem.stats().clone(),
        }
    }
}
