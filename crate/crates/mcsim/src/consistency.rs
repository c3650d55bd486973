//! Memory consistency models and litmus-test machinery.
//!
//! Two models are supported. Sequential consistency (SC) interleaves thread
//! operations over a single memory with no buffering. Total store order (TSO)
//! gives each thread a FIFO store buffer: stores enter the buffer and drain to
//! memory later, loads forward from the newest matching own-buffer entry
//! before reading memory, and a fence blocks until the buffer is empty. The
//! only reordering TSO permits beyond SC is an older store passing a younger
//! load.
//!
//! Litmus tests are short multi-threaded programs written in the ordinary
//! assembly syntax, restricted to straight-line code whose store values and
//! addresses are compile-time constants: `addi` to build constants, `lw`/`sw`
//! on named `.data` variables, and `fence`. [`enumerate_outcomes`] explores
//! every interleaving (and every store-buffer drain schedule under TSO) by
//! memoized depth-first search and returns the exact set of reachable
//! outcomes — this is exhaustive, not sampled, so absence from the set is a
//! proof within the model.
//!
//! Outcome registers: the k-th load in (thread, program-position) order
//! defines observation register `rk` used by `expect` comment lines:
//!
//! ```text
//! # expect allowed (r0=0, r1=0) under tso
//! # expect forbidden (r0=0, r1=0) under sc
//! ```
//!
//! Conditions may also constrain final memory by variable name (`x=2`).
//!
//! ```
//! use mcsim::consistency::{enumerate_outcomes, parse_litmus, Model};
//!
//! let test = parse_litmus(
//!     ".data x 0\n.data y 0\n\
//!      .thread 0\n addi r1, r0, 1\n sw r1, x(r0)\n lw r2, y(r0)\n\
//!      .thread 1\n addi r1, r0, 1\n sw r1, y(r0)\n lw r2, x(r0)\n",
//! )
//! .unwrap();
//! let sc = enumerate_outcomes(&test, Model::Sc);
//! let tso = enumerate_outcomes(&test, Model::Tso);
//! // Both loads reading 0 requires store->load reordering: TSO only.
//! assert!(!sc.iter().any(|o| o.regs == [0, 0]));
//! assert!(tso.iter().any(|o| o.regs == [0, 0]));
//! ```

use std::collections::{BTreeMap, BTreeSet, HashSet, VecDeque};
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::isa::{assemble, Addr, AsmError, Instr, Opcode, Program, Word};

/// Which consistency model governs an execution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Model {
    Sc,
    Tso,
}

impl fmt::Display for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Model::Sc => write!(f, "sc"),
            Model::Tso => write!(f, "tso"),
        }
    }
}

impl FromStr for Model {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "sc" => Ok(Model::Sc),
            "tso" => Ok(Model::Tso),
            other => Err(format!("unknown consistency model '{other}' (want sc or tso)")),
        }
    }
}

/// FIFO store buffer used by the cycle-level core under TSO. Word-granular:
/// forwarding matches exact addresses only.
#[derive(Debug, Clone, Default)]
pub struct StoreBuffer {
    entries: VecDeque<(Addr, Word)>,
    capacity: usize,
}

impl StoreBuffer {
    /// `capacity` of 0 means unbounded.
    pub fn new(capacity: usize) -> Self {
        StoreBuffer { entries: VecDeque::new(), capacity }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_full(&self) -> bool {
        self.capacity != 0 && self.entries.len() >= self.capacity
    }

    /// Caller must check `is_full` first; entries are never dropped.
    pub fn push(&mut self, addr: Addr, val: Word) {
        debug_assert!(!self.is_full());
        self.entries.push_back((addr, val));
    }

    /// Newest entry for `addr`, if any (store-to-load forwarding).
    pub fn forward(&self, addr: Addr) -> Option<Word> {
        self.entries.iter().rev().find(|&&(a, _)| a == addr).map(|&(_, v)| v)
    }

    /// Pop the oldest entry for writing to memory.
    pub fn drain_one(&mut self) -> Option<(Addr, Word)> {
        self.entries.pop_front()
    }

    pub fn iter(&self) -> impl Iterator<Item = &(Addr, Word)> {
        self.entries.iter()
    }
}

/// One abstract litmus operation. `var` indexes [`LitmusTest::vars`]; `obs`
/// indexes the global observation-register list.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LitmusOp {
    Store { var: usize, val: Word },
    Load { var: usize, obs: usize },
    Fence,
}

/// A condition an outcome must meet: an observation register or a final
/// memory variable equal to a value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ExpectCond {
    Reg { idx: usize, val: Word },
    Mem { var: usize, val: Word },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Expectation {
    pub allowed: bool,
    pub conds: Vec<ExpectCond>,
    pub model: Model,
    pub line: usize,
}

/// A parsed litmus test: the abstract per-thread operations driving the
/// enumerators, plus the assembled program (halt appended where missing) so
/// the cycle-level simulator can run the identical code.
#[derive(Debug, Clone)]
pub struct LitmusTest {
    pub isa: Program,
    pub ops: Vec<Vec<LitmusOp>>,
    /// Observation registers, global (thread, position) order: `(thread, reg)`.
    pub obs: Vec<(usize, u8)>,
    /// Named variables, sorted by name; index is the `var` id.
    pub vars: Vec<(String, Addr)>,
    pub expectations: Vec<Expectation>,
}

/// One reachable final state: observation-register values in global order and
/// final memory over `vars` in the same index order.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Outcome {
    pub regs: Vec<Word>,
    pub mem: Vec<Word>,
}

#[derive(Debug, Error, PartialEq)]
pub enum LitmusError {
    #[error(transparent)]
    Asm(#[from] AsmError),
    #[error("thread {thread} op {index}: {found} is not valid litmus code (straight-line addi/lw/sw/fence only)")]
    Unsupported { thread: usize, index: usize, found: String },
    #[error("thread {thread} op {index}: register r{reg} has no compile-time constant value")]
    NonConstant { thread: usize, index: usize, reg: u8 },
    #[error("thread {thread} op {index}: address {addr:#x} is not a named .data variable")]
    UnknownAddress { thread: usize, index: usize, addr: Addr },
    #[error("thread {thread} op {index}: r{reg} already holds an observation; it must not be overwritten")]
    ObsOverwritten { thread: usize, index: usize, reg: u8 },
    #[error("thread {thread} op {index}: loads must target r1..r31, not r0")]
    LoadIntoZero { thread: usize, index: usize },
    #[error("thread {thread}: code after halt")]
    CodeAfterHalt { thread: usize },
    #[error("line {line}: malformed expect comment: {msg}")]
    BadExpect { line: usize, msg: String },
    #[error("a litmus test needs at least one thread with at least one operation")]
    Empty,
}

/// Parse litmus assembly plus `# expect ...` comment lines.
pub fn parse_litmus(src: &str) -> Result<LitmusTest, LitmusError> {
    let mut isa = assemble(src)?;
    let vars: Vec<(String, Addr)> =
        isa.symbols.iter().map(|(n, &a)| (n.clone(), a)).collect();
    let addr_to_var: BTreeMap<Addr, usize> =
        vars.iter().enumerate().map(|(i, &(_, a))| (a, i)).collect();

    let mut ops: Vec<Vec<LitmusOp>> = Vec::new();
    let mut obs: Vec<(usize, u8)> = Vec::new();
    for (thread, code) in isa.threads.iter().enumerate() {
        let mut t_ops = Vec::new();
        // Constant tracking: registers start at 0; a load makes its target
        // runtime-dependent (None).
        let mut known: [Option<Word>; crate::isa::NUM_REGS] = [Some(0); crate::isa::NUM_REGS];
        let mut obs_regs: BTreeSet<u8> = BTreeSet::new();
        let mut halted = false;
        for (index, instr) in code.iter().enumerate() {
            if halted {
                return Err(LitmusError::CodeAfterHalt { thread });
            }
            let constant = |reg: u8| -> Result<Word, LitmusError> {
                known[reg as usize].ok_or(LitmusError::NonConstant { thread, index, reg })
            };
            let var_at = |addr: Addr| -> Result<usize, LitmusError> {
                addr_to_var
                    .get(&addr)
                    .copied()
                    .ok_or(LitmusError::UnknownAddress { thread, index, addr })
            };
            match instr.opcode {
                Opcode::Addi => {
                    let v = constant(instr.src1)?.wrapping_add(instr.imm);
                    if obs_regs.contains(&instr.dest) {
                        return Err(LitmusError::ObsOverwritten {
                            thread,
                            index,
                            reg: instr.dest,
                        });
                    }
                    if instr.dest != 0 {
                        known[instr.dest as usize] = Some(v);
                    }
                }
                Opcode::Load => {
                    if instr.dest == 0 {
                        return Err(LitmusError::LoadIntoZero { thread, index });
                    }
                    if obs_regs.contains(&instr.dest) {
                        return Err(LitmusError::ObsOverwritten {
                            thread,
                            index,
                            reg: instr.dest,
                        });
                    }
                    let addr = constant(instr.src1)?.wrapping_add(instr.imm) as Addr;
                    let var = var_at(addr)?;
                    t_ops.push(LitmusOp::Load { var, obs: 0 }); // obs filled below
                    obs_regs.insert(instr.dest);
                    obs.push((thread, instr.dest));
                    known[instr.dest as usize] = None;
                }
                Opcode::Store => {
                    let val = constant(instr.src1)?;
                    let addr = constant(instr.src2)?.wrapping_add(instr.imm) as Addr;
                    let var = var_at(addr)?;
                    t_ops.push(LitmusOp::Store { var, val });
                }
                Opcode::Fence => t_ops.push(LitmusOp::Fence),
                Opcode::Halt => halted = true,
                other => {
                    return Err(LitmusError::Unsupported {
                        thread,
                        index,
                        found: format!("{other:?}").to_lowercase(),
                    })
                }
            }
        }
        ops.push(t_ops);
    }
    if ops.iter().all(|t| t.is_empty()) {
        return Err(LitmusError::Empty);
    }

    // Re-number loads with their global observation index.
    let mut next_obs = 0;
    for t_ops in &mut ops {
        for op in t_ops.iter_mut() {
            if let LitmusOp::Load { obs, .. } = op {
                *obs = next_obs;
                next_obs += 1;
            }
        }
    }
    debug_assert_eq!(next_obs, obs.len());

    // The cycle simulator needs every thread to terminate.
    for code in &mut isa.threads {
        if code.last().map(|i| i.opcode) != Some(Opcode::Halt) {
            code.push(Instr { opcode: Opcode::Halt, dest: 0, src1: 0, src2: 0, imm: 0 });
        }
    }

    let expectations = parse_expectations(src, &obs, &vars)?;
    Ok(LitmusTest { isa, ops, obs, vars, expectations })
}

fn parse_expectations(
    src: &str,
    obs: &[(usize, u8)],
    vars: &[(String, Addr)],
) -> Result<Vec<Expectation>, LitmusError> {
    let mut out = Vec::new();
    for (i, raw) in src.lines().enumerate() {
        let line = i + 1;
        let Some(comment) = raw.split_once('#').map(|(_, c)| c.trim()) else { continue };
        let Some(rest) = comment.strip_prefix("expect") else { continue };
        let bad = |msg: &str| LitmusError::BadExpect { line, msg: msg.to_string() };
        let rest = rest.trim();
        let (allowed, rest) = if let Some(r) = rest.strip_prefix("allowed") {
            (true, r)
        } else if let Some(r) = rest.strip_prefix("forbidden") {
            (false, r)
        } else {
            return Err(bad("want 'allowed' or 'forbidden'"));
        };
        let rest = rest.trim();
        let open = rest.strip_prefix('(').ok_or_else(|| bad("want '(' after verdict"))?;
        let (cond_str, rest) =
            open.split_once(')').ok_or_else(|| bad("unterminated condition list"))?;
        let rest = rest.trim();
        let model_str =
            rest.strip_prefix("under").ok_or_else(|| bad("want 'under sc|tso'"))?.trim();
        let model = Model::from_str(model_str).map_err(|e| bad(&e))?;

        let mut conds = Vec::new();
        for part in cond_str.split(',') {
            let part = part.trim();
            if part.is_empty() {
                continue;
            }
            let (lhs, rhs) =
                part.split_once('=').ok_or_else(|| bad("condition must be name=value"))?;
            let (lhs, rhs) = (lhs.trim(), rhs.trim());
            let val: Word = rhs
                .parse()
                .map_err(|_| bad(&format!("bad value '{rhs}'")))?;
            if let Some(n) = lhs.strip_prefix('r').and_then(|n| n.parse::<usize>().ok()) {
                if n >= obs.len() {
                    return Err(bad(&format!(
                        "observation register r{n} out of range (test has {})",
                        obs.len()
                    )));
                }
                conds.push(ExpectCond::Reg { idx: n, val });
            } else if let Some(v) = vars.iter().position(|(name, _)| name == lhs) {
                conds.push(ExpectCond::Mem { var: v, val });
            } else {
                return Err(bad(&format!("unknown condition name '{lhs}'")));
            }
        }
        out.push(Expectation { allowed, conds, model, line });
    }
    Ok(out)
}

#[derive(Clone, PartialEq, Eq, Hash)]
struct EnumState {
    pcs: Vec<usize>,
    /// Per-thread FIFO store buffers (TSO only; always empty under SC).
    sbs: Vec<Vec<(usize, Word)>>,
    mem: Vec<Word>,
    obs: Vec<Option<Word>>,
}

/// Exhaustively enumerate every outcome the model admits, via depth-first
/// search with state memoization. Terminal states require drained buffers.
pub fn enumerate_outcomes(test: &LitmusTest, model: Model) -> BTreeSet<Outcome> {
    let n = test.ops.len();
    let start = EnumState {
        pcs: vec![0; n],
        sbs: vec![Vec::new(); n],
        mem: vec![0; test.vars.len()],
        obs: vec![None; test.obs.len()],
    };
    let mut outcomes = BTreeSet::new();
    let mut seen: HashSet<EnumState> = HashSet::new();
    let mut stack = vec![start];
    while let Some(st) = stack.pop() {
        if !seen.insert(st.clone()) {
            continue;
        }
        let done = (0..n).all(|t| st.pcs[t] == test.ops[t].len() && st.sbs[t].is_empty());
        if done {
            outcomes.insert(Outcome {
                regs: st.obs.iter().map(|v| v.expect("all loads executed")).collect(),
                mem: st.mem.clone(),
            });
            continue;
        }
        for t in 0..n {
            if st.pcs[t] < test.ops[t].len() {
                match test.ops[t][st.pcs[t]] {
                    LitmusOp::Store { var, val } => {
                        let mut s = st.clone();
                        s.pcs[t] += 1;
                        match model {
                            Model::Sc => s.mem[var] = val,
                            Model::Tso => s.sbs[t].push((var, val)),
                        }
                        stack.push(s);
                    }
                    LitmusOp::Load { var, obs } => {
                        let mut s = st.clone();
                        s.pcs[t] += 1;
                        let fwd = st.sbs[t].iter().rev().find(|&&(v, _)| v == var);
                        s.obs[obs] = Some(match fwd {
                            Some(&(_, v)) => v,
                            None => st.mem[var],
                        });
                        stack.push(s);
                    }
                    LitmusOp::Fence => {
                        // Blocks until the buffer drains.
                        if st.sbs[t].is_empty() {
                            let mut s = st.clone();
                            s.pcs[t] += 1;
                            stack.push(s);
                        }
                    }
                }
            }
            if !st.sbs[t].is_empty() {
                let mut s = st.clone();
                let (var, val) = s.sbs[t].remove(0);
                s.mem[var] = val;
                stack.push(s);
            }
        }
    }
    outcomes
}

pub fn outcome_satisfies(outcome: &Outcome, conds: &[ExpectCond]) -> bool {
    conds.iter().all(|c| match *c {
        ExpectCond::Reg { idx, val } => outcome.regs[idx] == val,
        ExpectCond::Mem { var, val } => outcome.mem[var] == val,
    })
}

/// `allowed` passes when some outcome satisfies the conditions; `forbidden`
/// passes when none does.
pub fn check_expectation(outcomes: &BTreeSet<Outcome>, exp: &Expectation) -> bool {
    let hit = outcomes.iter().any(|o| outcome_satisfies(o, &exp.conds));
    hit == exp.allowed
}

/// Evaluate every `expect` line of a test; returns `(expectation, passed)`.
pub fn evaluate(test: &LitmusTest) -> Vec<(Expectation, bool)> {
    let mut cache: BTreeMap<Model, BTreeSet<Outcome>> = BTreeMap::new();
    test.expectations
        .iter()
        .map(|e| {
            let outcomes = cache
                .entry(e.model)
                .or_insert_with(|| enumerate_outcomes(test, e.model));
            (e.clone(), check_expectation(outcomes, e))
        })
        .collect()
}

/// Render an outcome with the test's register and variable names, e.g.
/// `t0:r2=0 t1:r2=1 | x=1 y=1`.
pub fn format_outcome(test: &LitmusTest, o: &Outcome) -> String {
    let regs: Vec<String> = test
        .obs
        .iter()
        .zip(&o.regs)
        .map(|(&(t, r), v)| format!("t{t}:r{r}={v}"))
        .collect();
    let mem: Vec<String> = test
        .vars
        .iter()
        .zip(&o.mem)
        .map(|((name, _), v)| format!("{name}={v}"))
        .collect();
    if regs.is_empty() {
        mem.join(" ")
    } else if mem.is_empty() {
        regs.join(" ")
    } else {
        format!("{} | {}", regs.join(" "), mem.join(" "))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const DEKKER: &str = "\
# store buffering: can both threads miss each other's store?
.data x 0
.data y 0

.thread 0
addi r1, r0, 1
sw   r1, x(r0)
lw   r2, y(r0)
halt

.thread 1
addi r1, r0, 1
sw   r1, y(r0)
lw   r2, x(r0)
halt

# expect forbidden (r0=0, r1=0) under sc
# expect allowed   (r0=0, r1=0) under tso
";

    fn reg_pairs(outcomes: &BTreeSet<Outcome>) -> BTreeSet<(Word, Word)> {
        outcomes.iter().map(|o| (o.regs[0], o.regs[1])).collect()
    }

    #[test]
    fn dekker_sc_has_exactly_three_outcomes() {
        let t = parse_litmus(DEKKER).unwrap();
        let sc = enumerate_outcomes(&t, Model::Sc);
        assert_eq!(
            reg_pairs(&sc),
            [(0, 1), (1, 0), (1, 1)].into_iter().collect()
        );
    }

    #[test]
    fn dekker_tso_adds_the_relaxed_outcome() {
        let t = parse_litmus(DEKKER).unwrap();
        let tso = enumerate_outcomes(&t, Model::Tso);
        assert_eq!(
            reg_pairs(&tso),
            [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().collect()
        );
    }

    #[test]
    fn dekker_expectations_all_pass() {
        let t = parse_litmus(DEKKER).unwrap();
        let results = evaluate(&t);
        assert_eq!(results.len(), 2);
        assert!(results.iter().all(|(_, ok)| *ok));
    }

    #[test]
    fn message_passing_never_reads_stale_data_under_tso() {
        let src = "\
.data x 0
.data y 0
.thread 0
addi r1, r0, 1
sw   r1, x(r0)
sw   r1, y(r0)
.thread 1
lw   r1, y(r0)
lw   r2, x(r0)
";
        let t = parse_litmus(src).unwrap();
        for model in [Model::Sc, Model::Tso] {
            let outs = enumerate_outcomes(&t, model);
            // Seeing the flag (y=1) but not the payload (x=0) requires FIFO
            // violation; absent under both models.
            assert!(
                !outs.iter().any(|o| o.regs == [1, 0]),
                "stale read under {model}"
            );
        }
    }

    #[test]
    fn own_store_forwards_from_the_buffer() {
        let src = "\
.data x 0
.thread 0
addi r1, r0, 7
sw   r1, x(r0)
lw   r2, x(r0)
";
        let t = parse_litmus(src).unwrap();
        let tso = enumerate_outcomes(&t, Model::Tso);
        assert!(tso.iter().all(|o| o.regs == [7]));
    }

    #[test]
    fn fences_restore_sc_for_store_buffering() {
        let src = "\
.data x 0
.data y 0
.thread 0
addi r1, r0, 1
sw   r1, x(r0)
fence
lw   r2, y(r0)
.thread 1
addi r1, r0, 1
sw   r1, y(r0)
fence
lw   r2, x(r0)
";
        let t = parse_litmus(src).unwrap();
        let tso = enumerate_outcomes(&t, Model::Tso);
        assert!(!tso.iter().any(|o| o.regs == [0, 0]));
        assert_eq!(reg_pairs(&tso), reg_pairs(&enumerate_outcomes(&t, Model::Sc)));
    }

    #[test]
    fn load_buffering_is_forbidden_under_both_models() {
        let src = "\
.data x 0
.data y 0
.thread 0
lw   r1, y(r0)
addi r2, r0, 1
sw   r2, x(r0)
.thread 1
lw   r1, x(r0)
addi r2, r0, 1
sw   r2, y(r0)
";
        let t = parse_litmus(src).unwrap();
        for model in [Model::Sc, Model::Tso] {
            assert!(!enumerate_outcomes(&t, model).iter().any(|o| o.regs == [1, 1]));
        }
    }

    #[test]
    fn independent_reads_see_a_single_store_order() {
        // IRIW: two writers, two readers that disagree on the write order.
        let src = "\
.data x 0
.data y 0
.thread 0
addi r1, r0, 1
sw   r1, x(r0)
.thread 1
addi r1, r0, 1
sw   r1, y(r0)
.thread 2
lw   r1, x(r0)
lw   r2, y(r0)
.thread 3
lw   r1, y(r0)
lw   r2, x(r0)
";
        let t = parse_litmus(src).unwrap();
        for model in [Model::Sc, Model::Tso] {
            let outs = enumerate_outcomes(&t, model);
            assert!(
                !outs.iter().any(|o| o.regs == [1, 0, 1, 0]),
                "IRIW violation under {model}"
            );
        }
    }

    #[test]
    fn coherence_final_memory_value_is_checkable() {
        let src = "\
.data x 0
.thread 0
addi r1, r0, 1
sw   r1, x(r0)
.thread 1
addi r1, r0, 2
sw   r1, x(r0)
# expect allowed (x=1) under tso
# expect allowed (x=2) under tso
# expect forbidden (x=3) under sc
";
        let t = parse_litmus(src).unwrap();
        assert!(evaluate(&t).iter().all(|(_, ok)| *ok));
    }

    #[test]
    fn parser_appends_halt_and_numbers_observations() {
        let t = parse_litmus(DEKKER).unwrap();
        assert_eq!(t.obs, vec![(0, 2), (1, 2)]);
        assert_eq!(t.vars.len(), 2);
        for code in &t.isa.threads {
            assert_eq!(code.last().unwrap().opcode, Opcode::Halt);
        }
        assert_eq!(
            t.ops[0],
            vec![LitmusOp::Store { var: 0, val: 1 }, LitmusOp::Load { var: 1, obs: 0 }]
        );
    }

    #[test]
    fn parser_rejects_non_litmus_code() {
        let branchy = ".data x 0\n.thread 0\nbeq r0, r0, 0\n";
        assert!(matches!(
            parse_litmus(branchy),
            Err(LitmusError::Unsupported { .. })
        ));

        let runtime_store = ".data x 0\n.thread 0\nlw r1, x(r0)\nsw r1, x(r0)\n";
        assert!(matches!(
            parse_litmus(runtime_store),
            Err(LitmusError::NonConstant { reg: 1, .. })
        ));

        let clobber = ".data x 0\n.thread 0\nlw r1, x(r0)\naddi r1, r0, 3\n";
        assert!(matches!(
            parse_litmus(clobber),
            Err(LitmusError::ObsOverwritten { reg: 1, .. })
        ));

        let unnamed = ".data x 0\n.thread 0\nlw r1, 64(r0)\n";
        assert!(matches!(
            parse_litmus(unnamed),
            Err(LitmusError::UnknownAddress { addr: 64, .. })
        ));

        let zero = ".data x 0\n.thread 0\nlw r0, x(r0)\n";
        assert!(matches!(
            parse_litmus(zero),
            Err(LitmusError::LoadIntoZero { .. })
        ));
    }

    #[test]
    fn expect_line_errors_carry_line_numbers() {
        let bad_model = ".data x 0\n.thread 0\nlw r1, x(r0)\n# expect allowed (r0=0) under lol\n";
        match parse_litmus(bad_model) {
            Err(LitmusError::BadExpect { line: 4, .. }) => {}
            other => panic!("unexpected: {other:?}"),
        }
        let bad_reg = ".data x 0\n.thread 0\nlw r1, x(r0)\n# expect allowed (r9=0) under sc\n";
        assert!(matches!(
            parse_litmus(bad_reg),
            Err(LitmusError::BadExpect { line: 4, .. })
        ));
    }

    #[test]
    fn store_buffer_forwards_newest_and_drains_fifo() {
        let mut sb = StoreBuffer::new(4);
        sb.push(0, 1);
        sb.push(4, 2);
        sb.push(0, 3);
        assert_eq!(sb.forward(0), Some(3));
        assert_eq!(sb.forward(4), Some(2));
        assert_eq!(sb.forward(8), None);
        assert_eq!(sb.drain_one(), Some((0, 1)));
        assert_eq!(sb.drain_one(), Some((4, 2)));
        assert_eq!(sb.forward(0), Some(3));
        sb.push(8, 9);
        assert!(!sb.is_full());
        sb.push(12, 9);
        sb.push(16, 9);
        assert!(sb.is_full());
    }

    #[test]
    fn format_outcome_is_readable() {
        let t = parse_litmus(DEKKER).unwrap();
        let o = Outcome { regs: vec![0, 1], mem: vec![1, 1] };
        assert_eq!(format_outcome(&t, &o), "t0:r2=0 t1:r2=1 | x=1 y=1");
    }

    /// Strategy: 2 threads, each up to 4 ops over 2 vars with small values.
    fn arb_ops() -> impl Strategy<Value = Vec<Vec<LitmusOp>>> {
        let op = prop_oneof![
            (0..2usize, 1..4i32).prop_map(|(var, val)| LitmusOp::Store { var, val }),
            (0..2usize).prop_map(|var| LitmusOp::Load { var, obs: 0 }),
            Just(LitmusOp::Fence),
        ];
        proptest::collection::vec(proptest::collection::vec(op, 0..4), 2..3)
    }

    fn number_obs(mut ops: Vec<Vec<LitmusOp>>) -> (Vec<Vec<LitmusOp>>, usize) {
        let mut next = 0;
        for t in &mut ops {
            for op in t.iter_mut() {
                if let LitmusOp::Load { obs, .. } = op {
                    *obs = next;
                    next += 1;
                }
            }
        }
        (ops, next)
    }

    proptest! {
        /// Everything SC can do, TSO can do: drain each store immediately.
        #[test]
        fn sc_outcomes_are_a_subset_of_tso(raw in arb_ops()) {
            let (ops, nobs) = number_obs(raw);
            let test = LitmusTest {
                isa: Program {
                    threads: vec![Vec::new(); ops.len()],
                    init_data: Default::default(),
                    symbols: Default::default(),
                },
                ops,
                obs: vec![(0, 1); nobs],
                vars: vec![("x".into(), 0), ("y".into(), 4)],
                expectations: Vec::new(),
            };
            let sc = enumerate_outcomes(&test, Model::Sc);
            let tso = enumerate_outcomes(&test, Model::Tso);
            prop_assert!(sc.is_subset(&tso), "sc={sc:?} tso={tso:?}");
        }
    }
}
