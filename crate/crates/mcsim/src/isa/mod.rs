//! A 32-register, word-oriented RISC subset and its golden functional model.
//!
//! The instruction set is deliberately small but covers every structure the
//! rest of the crate needs to exercise: integer ALU ops (`add`, `sub`, `and`,
//! `or`, `xor`, `slt`, `mul`), an immediate add (`addi`), word loads and
//! stores (`lw`, `sw`), conditional branches (`beq`, `bne`, `blt`), jumps
//! (`jal`, `jr`), a memory fence (`fence`), and `halt`.
//!
//! Conventions:
//!
//! * Register `r0` is hardwired to zero; writes to it are discarded.
//! * The program counter counts instructions; a taken branch adds its
//!   immediate to the pc, fall-through adds one.
//! * Data memory is byte-addressed but every access moves one 4-byte word and
//!   must be 4-aligned. Uninitialized memory reads as zero.
//! * Arithmetic wraps on overflow.
//!
//! [`functional_step`] executes exactly one instruction and is the crate-wide
//! correctness oracle: the out-of-order core in [`crate::cpu`] must commit the
//! same architectural state transitions in the same order.
//!
//! ```
//! use mcsim::isa;
//!
//! let prog = isa::assemble("
//!     addi r1, r0, 3
//!     sw   r1, 8(r0)
//!     lw   r2, 8(r0)
//!     halt
//! ").unwrap();
//! let run = isa::functional_run(&prog, 100).unwrap();
//! assert_eq!(run.state.threads[0].regs[2], 3);
//! assert_eq!(run.retired, 4);
//! ```

mod asm;

pub use asm::{assemble, AsmError};

use std::collections::BTreeMap;
use std::fmt;
use thiserror::Error;

/// Machine word. All registers and memory cells hold one.
pub type Word = i32;
/// Byte address; every memory access is word-sized and 4-aligned.
pub type Addr = u32;

pub const NUM_REGS: usize = 32;
/// Immediates are sign-extended 16-bit values.
pub const IMM_MIN: i32 = -32768;
pub const IMM_MAX: i32 = 32767;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Opcode {
    Add,
    Sub,
    And,
    Or,
    Xor,
    Slt,
    Mul,
    Addi,
    Load,
    Store,
    Beq,
    Bne,
    Blt,
    Jal,
    Jr,
    Fence,
    Halt,
}

impl Opcode {
    pub fn is_branch(self) -> bool {
        matches!(self, Opcode::Beq | Opcode::Bne | Opcode::Blt)
    }

    /// Any instruction that can redirect the pc.
    pub fn is_control(self) -> bool {
        matches!(
            self,
            Opcode::Beq | Opcode::Bne | Opcode::Blt | Opcode::Jal | Opcode::Jr
        )
    }

    pub fn is_mem(self) -> bool {
        matches!(self, Opcode::Load | Opcode::Store)
    }

    /// Does this instruction write `dest`?
    pub fn writes_dest(self) -> bool {
        matches!(
            self,
            Opcode::Add
                | Opcode::Sub
                | Opcode::And
                | Opcode::Or
                | Opcode::Xor
                | Opcode::Slt
                | Opcode::Mul
                | Opcode::Addi
                | Opcode::Load
                | Opcode::Jal
        )
    }
}

/// One decoded instruction. Fields not used by an opcode are zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Instr {
    pub opcode: Opcode,
    pub dest: u8,
    pub src1: u8,
    pub src2: u8,
    pub imm: i32,
}

impl Instr {
    pub fn halt() -> Self {
        Instr { opcode: Opcode::Halt, dest: 0, src1: 0, src2: 0, imm: 0 }
    }

    /// Source registers actually read by this instruction.
    pub fn sources(&self) -> Vec<u8> {
        match self.opcode {
            Opcode::Add | Opcode::Sub | Opcode::And | Opcode::Or | Opcode::Xor
            | Opcode::Slt | Opcode::Mul => vec![self.src1, self.src2],
            Opcode::Addi | Opcode::Load | Opcode::Jr => vec![self.src1],
            Opcode::Store => vec![self.src1, self.src2],
            Opcode::Beq | Opcode::Bne | Opcode::Blt => vec![self.src1, self.src2],
            Opcode::Jal | Opcode::Fence | Opcode::Halt => vec![],
        }
    }
}

impl fmt::Display for Instr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (d, s1, s2, imm) = (self.dest, self.src1, self.src2, self.imm);
        match self.opcode {
            Opcode::Add => write!(f, "add r{d}, r{s1}, r{s2}"),
            Opcode::Sub => write!(f, "sub r{d}, r{s1}, r{s2}"),
            Opcode::And => write!(f, "and r{d}, r{s1}, r{s2}"),
            Opcode::Or => write!(f, "or r{d}, r{s1}, r{s2}"),
            Opcode::Xor => write!(f, "xor r{d}, r{s1}, r{s2}"),
            Opcode::Slt => write!(f, "slt r{d}, r{s1}, r{s2}"),
            Opcode::Mul => write!(f, "mul r{d}, r{s1}, r{s2}"),
            Opcode::Addi => write!(f, "addi r{d}, r{s1}, {imm}"),
            Opcode::Load => write!(f, "lw r{d}, {imm}(r{s1})"),
            Opcode::Store => write!(f, "sw r{s1}, {imm}(r{s2})"),
            Opcode::Beq => write!(f, "beq r{s1}, r{s2}, {imm}"),
            Opcode::Bne => write!(f, "bne r{s1}, r{s2}, {imm}"),
            Opcode::Blt => write!(f, "blt r{s1}, r{s2}, {imm}"),
            Opcode::Jal => write!(f, "jal r{d}, {imm}"),
            Opcode::Jr => write!(f, "jr r{s1}"),
            Opcode::Fence => write!(f, "fence"),
            Opcode::Halt => write!(f, "halt"),
        }
    }
}

/// An assembled program: one instruction list per thread plus initial data.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Program {
    pub threads: Vec<Vec<Instr>>,
    /// Initial data memory contents, keyed by word-aligned byte address.
    pub init_data: BTreeMap<Addr, Word>,
    /// Named `.data` variables and the addresses assigned to them.
    pub symbols: BTreeMap<String, Addr>,
}

impl Program {
    /// Wrap a single instruction sequence as a one-thread program.
    pub fn single(instrs: Vec<Instr>) -> Self {
        Program { threads: vec![instrs], ..Default::default() }
    }
}

/// Architectural state of one hardware thread.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ThreadState {
    pub regs: [Word; NUM_REGS],
    /// Instruction index of the next instruction to execute.
    pub pc: u32,
    pub halted: bool,
}

impl Default for ThreadState {
    fn default() -> Self {
        ThreadState { regs: [0; NUM_REGS], pc: 0, halted: false }
    }
}

/// Whole-machine architectural state: every thread plus data memory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchState {
    pub threads: Vec<ThreadState>,
    pub mem: BTreeMap<Addr, Word>,
}

impl ArchState {
    pub fn initial(program: &Program) -> Self {
        ArchState {
            threads: vec![ThreadState::default(); program.threads.len().max(1)],
            mem: program.init_data.clone(),
        }
    }

    pub fn read_mem(&self, addr: Addr) -> Word {
        *self.mem.get(&addr).unwrap_or(&0)
    }

    /// Drop explicit zero entries so states that differ only in whether an
    /// address was ever touched compare equal (untouched memory reads zero).
    pub fn canonicalize(&mut self) {
        self.mem.retain(|_, v| *v != 0);
    }
}

/// The architectural effect of one executed instruction, for commit-order
/// comparison against the pipelined core.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepEffect {
    /// pc of the executed instruction.
    pub pc: u32,
    pub reg_write: Option<(u8, Word)>,
    pub mem_write: Option<(Addr, Word)>,
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum StepError {
    #[error("thread {thread}: pc {pc} outside program of {len} instructions")]
    PcOutOfRange { thread: usize, pc: u32, len: usize },
    #[error("thread {thread}: misaligned word access at address {addr:#x} (pc {pc})")]
    Misaligned { thread: usize, pc: u32, addr: Addr },
    #[error("thread {thread} already halted")]
    Halted { thread: usize },
    #[error("no thread {thread} in program")]
    NoSuchThread { thread: usize },
}

/// Execute one instruction of `thread`, mutating `state`.
pub fn functional_step(
    state: &mut ArchState,
    program: &Program,
    thread: usize,
) -> Result<StepEffect, StepError> {
    let code = program
        .threads
        .get(thread)
        .ok_or(StepError::NoSuchThread { thread })?;
    let ts = &mut state.threads[thread];
    if ts.halted {
        return Err(StepError::Halted { thread });
    }
    let pc = ts.pc;
    let instr = *code
        .get(pc as usize)
        .ok_or(StepError::PcOutOfRange { thread, pc, len: code.len() })?;

    let rs1 = ts.regs[instr.src1 as usize];
    let rs2 = ts.regs[instr.src2 as usize];
    let mut next_pc = pc.wrapping_add(1);
    let mut reg_write = None;
    let mut mem_write = None;

    let mut write_reg = |ts: &mut ThreadState, r: u8, v: Word| {
        if r != 0 {
            ts.regs[r as usize] = v;
        }
        // r0 writes are architecturally visible as writes of the constant 0.
        reg_write = Some((r, if r == 0 { 0 } else { v }));
    };

    match instr.opcode {
        Opcode::Add => write_reg(ts, instr.dest, rs1.wrapping_add(rs2)),
        Opcode::Sub => write_reg(ts, instr.dest, rs1.wrapping_sub(rs2)),
        Opcode::And => write_reg(ts, instr.dest, rs1 & rs2),
        Opcode::Or => write_reg(ts, instr.dest, rs1 | rs2),
        Opcode::Xor => write_reg(ts, instr.dest, rs1 ^ rs2),
        Opcode::Slt => write_reg(ts, instr.dest, (rs1 < rs2) as Word),
        Opcode::Mul => write_reg(ts, instr.dest, rs1.wrapping_mul(rs2)),
        Opcode::Addi => write_reg(ts, instr.dest, rs1.wrapping_add(instr.imm)),
        Opcode::Load => {
            let addr = rs1.wrapping_add(instr.imm) as Addr;
            if addr % 4 != 0 {
                return Err(StepError::Misaligned { thread, pc, addr });
            }
            let v = *state.mem.get(&addr).unwrap_or(&0);
            write_reg(&mut state.threads[thread], instr.dest, v);
        }
        Opcode::Store => {
            let addr = rs2.wrapping_add(instr.imm) as Addr;
            if addr % 4 != 0 {
                return Err(StepError::Misaligned { thread, pc, addr });
            }
            state.mem.insert(addr, rs1);
            mem_write = Some((addr, rs1));
        }
        Opcode::Beq => {
            if rs1 == rs2 {
                next_pc = pc.wrapping_add_signed(instr.imm);
            }
        }
        Opcode::Bne => {
            if rs1 != rs2 {
                next_pc = pc.wrapping_add_signed(instr.imm);
            }
        }
        Opcode::Blt => {
            if rs1 < rs2 {
                next_pc = pc.wrapping_add_signed(instr.imm);
            }
        }
        Opcode::Jal => {
            write_reg(ts, instr.dest, pc.wrapping_add(1) as Word);
            next_pc = pc.wrapping_add_signed(instr.imm);
        }
        Opcode::Jr => {
            next_pc = rs1 as u32;
        }
        Opcode::Fence => {
            // Ordering only; architecturally a no-op for a single thread.
        }
        Opcode::Halt => {
            state.threads[thread].halted = true;
        }
    }

    let ts = &mut state.threads[thread];
    if !ts.halted {
        ts.pc = next_pc;
    }
    Ok(StepEffect { pc, reg_write, mem_write })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub state: ArchState,
    /// Instructions executed, including the final `halt`.
    pub retired: u64,
}

#[derive(Debug, Error, PartialEq)]
pub enum RunError {
    #[error("cycle budget exhausted after {retired} instructions without reaching halt")]
    BudgetExhausted { state: Box<ArchState>, retired: u64 },
    #[error(transparent)]
    Step(#[from] StepError),
}

/// Run thread 0 of `program` on the golden model until `halt`, executing at
/// most `budget` instructions. On budget exhaustion the partial state is
/// returned inside the error.
pub fn functional_run(program: &Program, budget: u64) -> Result<RunResult, RunError> {
    let mut state = ArchState::initial(program);
    let mut retired = 0u64;
    while !state.threads[0].halted {
        if retired >= budget {
            return Err(RunError::BudgetExhausted { state: Box::new(state), retired });
        }
        functional_step(&mut state, program, 0)?;
        retired += 1;
    }
    Ok(RunResult { state, retired })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_src(src: &str, budget: u64) -> RunResult {
        functional_run(&assemble(src).unwrap(), budget).unwrap()
    }

    #[test]
    fn sum_one_to_ten() {
        let r = run_src(
            "addi r1, r0, 10
             addi r2, r0, 0
             loop: add r2, r2, r1
             addi r1, r1, -1
             bne r1, r0, loop
             halt",
            1000,
        );
        assert_eq!(r.state.threads[0].regs[2], 55);
        assert_eq!(r.state.threads[0].regs[1], 0);
        // 2 setup + 3 per iteration * 10 + halt.
        assert_eq!(r.retired, 33);
        assert!(r.state.threads[0].halted);
    }

    #[test]
    fn immediate_halt_retires_one() {
        let r = run_src("halt", 10);
        assert_eq!(r.retired, 1);
        assert_eq!(r.state.threads[0].regs, [0; 32]);
        assert_eq!(r.state.threads[0].pc, 0);
    }

    #[test]
    fn r0_is_hardwired_zero() {
        let r = run_src(
            "addi r0, r0, 5
             add r0, r0, r0
             addi r1, r0, 7
             halt",
            10,
        );
        assert_eq!(r.state.threads[0].regs[0], 0);
        assert_eq!(r.state.threads[0].regs[1], 7);
    }

    #[test]
    fn store_load_roundtrip_and_uninit_reads_zero() {
        let r = run_src(
            "addi r1, r0, -13
             sw   r1, 16(r0)
             lw   r2, 16(r0)
             lw   r3, 64(r0)      # never written
             halt",
            10,
        );
        assert_eq!(r.state.threads[0].regs[2], -13);
        assert_eq!(r.state.threads[0].regs[3], 0);
        assert_eq!(r.state.mem.get(&16), Some(&-13));
    }

    #[test]
    fn load_and_store_addresses_add_immediate_to_base() {
        let r = run_src(
            "addi r2, r0, 100
             addi r1, r0, 9
             sw   r1, 4(r2)
             lw   r3, 4(r2)
             halt",
            10,
        );
        assert_eq!(r.state.mem.get(&104), Some(&9));
        assert_eq!(r.state.threads[0].regs[3], 9);
    }

    #[test]
    fn misaligned_access_is_an_error() {
        let prog = assemble("addi r1, r0, 2\nlw r2, 0(r1)\nhalt").unwrap();
        let err = functional_run(&prog, 10).unwrap_err();
        match err {
            RunError::Step(StepError::Misaligned { addr, pc, .. }) => {
                assert_eq!(addr, 2);
                assert_eq!(pc, 1);
            }
            other => panic!("expected misaligned error, got {other:?}"),
        }
    }

    #[test]
    fn branches_compare_signed() {
        // blt taken when src1 < src2 (signed).
        let r = run_src(
            "addi r1, r0, -1
             addi r2, r0, 1
             blt  r1, r2, yes
             addi r3, r0, 111
             halt
             yes: addi r3, r0, 222
             halt",
            10,
        );
        assert_eq!(r.state.threads[0].regs[3], 222);
    }

    #[test]
    fn slt_and_mul() {
        let r = run_src(
            "addi r1, r0, -5
             addi r2, r0, 3
             slt r3, r1, r2
             slt r4, r2, r1
             mul r5, r1, r2
             halt",
            10,
        );
        let regs = &r.state.threads[0].regs;
        assert_eq!(regs[3], 1);
        assert_eq!(regs[4], 0);
        assert_eq!(regs[5], -15);
    }

    #[test]
    fn jal_links_and_jr_returns() {
        let r = run_src(
            "jal r31, func
             addi r2, r0, 1     # runs after return
             halt
             func: addi r1, r0, 42
             jr r31",
            20,
        );
        let regs = &r.state.threads[0].regs;
        assert_eq!(regs[1], 42);
        assert_eq!(regs[2], 1);
        assert_eq!(regs[31], 1); // link = pc of jal + 1
    }

    #[test]
    fn fence_is_architecturally_neutral() {
        let a = run_src("addi r1, r0, 4\nfence\naddi r2, r1, 1\nhalt", 10);
        assert_eq!(a.state.threads[0].regs[2], 5);
        assert_eq!(a.retired, 4);
    }

    #[test]
    fn infinite_loop_exhausts_budget_with_partial_state() {
        let prog = assemble("addi r1, r0, 3\nspin: beq r0, r0, spin\nhalt").unwrap();
        match functional_run(&prog, 1000) {
            Err(RunError::BudgetExhausted { state, retired }) => {
                assert_eq!(retired, 1000);
                assert_eq!(state.threads[0].regs[1], 3);
                assert!(!state.threads[0].halted);
            }
            other => panic!("expected budget exhaustion, got {other:?}"),
        }
    }

    #[test]
    fn pc_past_end_is_an_error() {
        let prog = assemble("addi r1, r0, 1").unwrap(); // no halt
        let err = functional_run(&prog, 10).unwrap_err();
        assert_eq!(
            err,
            RunError::Step(StepError::PcOutOfRange { thread: 0, pc: 1, len: 1 })
        );
    }

    #[test]
    fn step_after_halt_is_an_error() {
        let prog = assemble("halt").unwrap();
        let mut st = ArchState::initial(&prog);
        functional_step(&mut st, &prog, 0).unwrap();
        assert_eq!(
            functional_step(&mut st, &prog, 0),
            Err(StepError::Halted { thread: 0 })
        );
    }

    #[test]
    fn step_effects_report_commits() {
        let prog = assemble("addi r1, r0, 2\nsw r1, 8(r0)\nhalt").unwrap();
        let mut st = ArchState::initial(&prog);
        let e0 = functional_step(&mut st, &prog, 0).unwrap();
        assert_eq!(e0, StepEffect { pc: 0, reg_write: Some((1, 2)), mem_write: None });
        let e1 = functional_step(&mut st, &prog, 0).unwrap();
        assert_eq!(e1, StepEffect { pc: 1, reg_write: None, mem_write: Some((8, 2)) });
    }

    #[test]
    fn arithmetic_wraps() {
        let r = run_src(
            "addi r1, r0, 1
             addi r2, r0, 0
             addi r3, r0, 31
             shift: add r1, r1, r1
             addi r3, r3, -1
             bne r3, r0, shift
             addi r1, r1, -1      # r1 = i32::MAX
             addi r4, r0, 1
             add  r5, r1, r4      # wraps to i32::MIN
             halt",
            200,
        );
        let regs = &r.state.threads[0].regs;
        assert_eq!(regs[1], i32::MAX);
        assert_eq!(regs[5], i32::MIN);
    }
}
