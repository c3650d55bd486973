//! Exhaustive state-space exploration of the coherence protocols.
//!
//! Every core may issue a load, store, or eviction whenever its line is
//! stable, and every in-flight message may be delivered in any order that
//! respects per-channel FIFO (matching the network's same-source-same-
//! destination ordering). Stores write ghost values `(g + 1) mod K`, so data
//! correctness is checkable: in every reachable state, every readable cached
//! copy must equal the value of the globally last completed store, and at
//! most one core may hold the line exclusively while nobody else can read it
//! (single-writer / multiple-reader). A final reverse-reachability pass
//! proves every reachable state can still drain to a quiescent one — no
//! deadlock or livelock.
//!
//! Fault injection deliberately breaks the protocol to show the checker has
//! teeth: a sharer that acknowledges an invalidation without dropping its
//! copy produces an SWMR counterexample, and a dropped writeback ack produces
//! a stuck-state counterexample.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fmt;

use super::protocol::{
    CacheLine, Completed, CoreReq, DirLine, Mesi, Msg, ProtocolError, ReqOutcome, Send,
    SnoopLine, SnoopTxn, To,
};

/// Ghost-value domain size; stores cycle through 0..K.
pub const GHOST_VALUES: u8 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Snoopy,
    Directory,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Snoopy => write!(f, "snoopy"),
            Variant::Directory => write!(f, "directory"),
        }
    }
}

/// Deliberate protocol corruption for checker self-tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Inject {
    #[default]
    None,
    /// The highest-numbered core acks invalidations but keeps its copy.
    IgnoreInv,
    /// Writeback acks vanish in flight (directory only).
    DropWbAck,
}

#[derive(Debug, Clone)]
pub struct CheckConfig {
    pub variant: Variant,
    pub cores: usize,
    /// Explore voluntary evictions too (more races, larger space).
    pub evictions: bool,
    pub inject: Inject,
    /// Abort if the reachable space exceeds this many states.
    pub max_states: usize,
}

impl CheckConfig {
    pub fn new(variant: Variant, cores: usize) -> Self {
        CheckConfig { variant, cores, evictions: true, inject: Inject::None, max_states: 4_000_000 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub states: usize,
    pub quiescent_states: usize,
    /// Stable line states any core ever occupies.
    pub stable_set: BTreeSet<Mesi>,
    /// Every line state observed, transients included.
    pub observed: BTreeSet<Mesi>,
}

#[derive(Debug)]
pub enum CheckError {
    Swmr { detail: String, trace: Vec<String> },
    DataValue { detail: String, trace: Vec<String> },
    Protocol { err: ProtocolError, trace: Vec<String> },
    /// Reachable state that can never drain back to quiescence.
    Stuck { trace: Vec<String> },
    StateLimit { limit: usize },
    BadConfig(String),
}

impl fmt::Display for CheckError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckError::Swmr { detail, trace } => {
                write!(f, "SWMR violated: {detail} after {} steps", trace.len())
            }
            CheckError::DataValue { detail, trace } => {
                write!(f, "stale data observed: {detail} after {} steps", trace.len())
            }
            CheckError::Protocol { err, trace } => {
                write!(f, "protocol error: {err} after {} steps", trace.len())
            }
            CheckError::Stuck { trace } => {
                write!(f, "state cannot reach quiescence after {} steps", trace.len())
            }
            CheckError::StateLimit { limit } => write!(f, "state limit {limit} exceeded"),
            CheckError::BadConfig(m) => write!(f, "{m}"),
        }
    }
}

impl CheckError {
    pub fn trace(&self) -> &[String] {
        match self {
            CheckError::Swmr { trace, .. }
            | CheckError::DataValue { trace, .. }
            | CheckError::Protocol { trace, .. }
            | CheckError::Stuck { trace } => trace,
            _ => &[],
        }
    }
}

fn next_ghost(g: u8) -> u8 {
    (g + 1) % GHOST_VALUES
}

/// Generic BFS driver over a protocol-specific world type.
trait World: Clone + Eq + std::hash::Hash {
    /// `(label, successor)` pairs; delivering/handling must already have run.
    fn successors(&self, out: &mut Vec<(String, Result<Self, FoundBug>)>);
    fn quiescent(&self) -> bool;
    fn observe(&self, stable: &mut BTreeSet<Mesi>, all: &mut BTreeSet<Mesi>);
}

#[derive(Debug)]
enum FoundBug {
    Swmr(String),
    Data(String),
    Protocol(ProtocolError),
}

fn explore<W: World>(start: W, max_states: usize) -> Result<CheckReport, CheckError> {
    let mut index: HashMap<W, usize> = HashMap::new();
    let mut states: Vec<W> = Vec::new();
    let mut parent: Vec<(usize, String)> = Vec::new();
    let mut edges: Vec<Vec<usize>> = Vec::new();

    let trace_to = |i: usize, parent: &[(usize, String)]| -> Vec<String> {
        let mut t = Vec::new();
        let mut cur = i;
        while cur != 0 {
            let (p, ref label) = parent[cur];
            t.push(label.clone());
            cur = p;
        }
        t.reverse();
        t
    };

    index.insert(start.clone(), 0);
    states.push(start);
    parent.push((0, String::new()));
    edges.push(Vec::new());

    let mut frontier = 0usize;
    let mut succ = Vec::new();
    while frontier < states.len() {
        if states.len() > max_states {
            return Err(CheckError::StateLimit { limit: max_states });
        }
        let cur = states[frontier].clone();
        succ.clear();
        cur.successors(&mut succ);
        for (label, next) in succ.drain(..) {
            match next {
                Ok(w) => {
                    let ni = *index.entry(w.clone()).or_insert_with(|| {
                        states.push(w);
                        parent.push((frontier, label.clone()));
                        edges.push(Vec::new());
                        states.len() - 1
                    });
                    edges[frontier].push(ni);
                }
                Err(bug) => {
                    let mut trace = trace_to(frontier, &parent);
                    trace.push(label);
                    return Err(match bug {
                        FoundBug::Swmr(detail) => CheckError::Swmr { detail, trace },
                        FoundBug::Data(detail) => CheckError::DataValue { detail, trace },
                        FoundBug::Protocol(err) => CheckError::Protocol { err, trace },
                    });
                }
            }
        }
        frontier += 1;
    }

    // Every reachable state must be able to drain to quiescence: backward
    // BFS from the quiescent states over reversed edges.
    let n = states.len();
    let mut rev: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, outs) in edges.iter().enumerate() {
        for &j in outs {
            rev[j].push(i);
        }
    }
    let mut ok = vec![false; n];
    let mut queue: VecDeque<usize> = VecDeque::new();
    let mut quiescent_states = 0;
    for (i, s) in states.iter().enumerate() {
        if s.quiescent() {
            quiescent_states += 1;
            ok[i] = true;
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        for &p in &rev[i] {
            if !ok[p] {
                ok[p] = true;
                queue.push_back(p);
            }
        }
    }
    if let Some(bad) = ok.iter().position(|&b| !b) {
        return Err(CheckError::Stuck { trace: trace_to(bad, &parent) });
    }

    let mut stable_set = BTreeSet::new();
    let mut observed = BTreeSet::new();
    for s in &states {
        s.observe(&mut stable_set, &mut observed);
    }
    Ok(CheckReport { states: n, quiescent_states, stable_set, observed })
}

// ---------------------------------------------------------------- directory

type Chan = BTreeMap<(usize, usize), VecDeque<Msg<u8>>>;

#[derive(Clone, PartialEq, Eq, Hash)]
struct DirWorld {
    lines: Vec<CacheLine<u8>>,
    dir: DirLine<u8>,
    /// FIFO per (from, to); node ids are cores, `cores` = the directory.
    chans: Chan,
    ghost: u8,
    evictions: bool,
    inject: Inject,
}

impl DirWorld {
    fn dir_node(&self) -> usize {
        self.lines.len()
    }

    fn push(&mut self, from: usize, to: To, msg: Msg<u8>) {
        let to = match to {
            To::Dir => self.dir_node(),
            To::Cache(c) => c,
        };
        self.chans.entry((from, to)).or_default().push_back(msg);
    }

    fn check_invariants(&self) -> Result<(), FoundBug> {
        let exclusive: Vec<usize> =
            (0..self.lines.len()).filter(|&c| self.lines[c].state.is_exclusive()).collect();
        if exclusive.len() > 1 {
            return Err(FoundBug::Swmr(format!("cores {exclusive:?} both own the line")));
        }
        if let Some(&owner) = exclusive.first() {
            for (c, l) in self.lines.iter().enumerate() {
                if c != owner && l.state.can_read() {
                    return Err(FoundBug::Swmr(format!(
                        "core {owner} is {} while core {c} still reads in {}",
                        self.lines[owner].state, l.state
                    )));
                }
            }
        }
        for (c, l) in self.lines.iter().enumerate() {
            if l.state.can_read() && l.data != Some(self.ghost) {
                return Err(FoundBug::Data(format!(
                    "core {c} ({}) caches {:?}, last store wrote {}",
                    l.state, l.data, self.ghost
                )));
            }
        }
        Ok(())
    }

    /// Deliver the head of channel `(f, t)`, running handler cascades.
    fn deliver(&mut self, f: usize, t: usize) -> Result<(), FoundBug> {
        let msg = self
            .chans
            .get_mut(&(f, t))
            .and_then(|q| q.pop_front())
            .expect("non-empty channel");
        if self.chans[&(f, t)].is_empty() {
            self.chans.remove(&(f, t)); // canonical form for memoization
        }
        if self.inject == Inject::DropWbAck && matches!(msg, Msg::WBAck) {
            return Ok(());
        }
        if t == self.dir_node() {
            let sends = self.dir.msg(f, msg).map_err(FoundBug::Protocol)?;
            for Send { to, msg } in sends {
                self.push(self.dir_node(), to, msg);
            }
            return Ok(());
        }
        // Buggy sharer: ack the invalidation, keep the copy.
        if self.inject == Inject::IgnoreInv && t == self.lines.len() - 1 {
            if let Msg::Inv { req } = msg {
                if self.lines[t].state == Mesi::S {
                    self.push(t, To::Cache(req), Msg::InvAck);
                    return Ok(());
                }
            }
        }
        let step = self.lines[t].msg(f, msg).map_err(FoundBug::Protocol)?;
        for Send { to, msg } in step.sends {
            self.push(t, to, msg);
        }
        match step.completed {
            Some(Completed::StorePermission) => {
                self.ghost = next_ghost(self.ghost);
                self.lines[t].write(self.ghost);
                if let Some((df, dm)) = self.lines[t].take_deferred() {
                    let step = self.lines[t].msg(df, dm).map_err(FoundBug::Protocol)?;
                    for Send { to, msg } in step.sends {
                        self.push(t, to, msg);
                    }
                    debug_assert!(step.completed.is_none());
                }
            }
            Some(Completed::Load(v)) => {
                // Loads that install a readable copy must observe the latest
                // store. (A fill invalidated mid-flight reads the value from
                // its own serialization point and keeps nothing.)
                if self.lines[t].state.can_read() && v != self.ghost {
                    return Err(FoundBug::Data(format!(
                        "core {t} load returned {v}, last store wrote {}",
                        self.ghost
                    )));
                }
            }
            Some(Completed::EvictDone) | None => {}
        }
        Ok(())
    }
}

impl World for DirWorld {
    fn successors(&self, out: &mut Vec<(String, Result<Self, FoundBug>)>) {
        let reqs: &[CoreReq] = if self.evictions {
            &[CoreReq::Load, CoreReq::Store, CoreReq::Evict]
        } else {
            &[CoreReq::Load, CoreReq::Store]
        };
        for c in 0..self.lines.len() {
            for &req in reqs {
                let mut w = self.clone();
                match w.lines[c].core_req(req) {
                    ReqOutcome::Stall => continue,
                    ReqOutcome::Done(val) => match req {
                        CoreReq::Load => {
                            let v = val.expect("hit returns data");
                            if v != w.ghost {
                                out.push((
                                    format!("core {c}: load hit"),
                                    Err(FoundBug::Data(format!(
                                        "core {c} load hit returned {v}, last store wrote {}",
                                        w.ghost
                                    ))),
                                ));
                                continue;
                            }
                        }
                        CoreReq::Store => {
                            w.ghost = next_ghost(w.ghost);
                            w.lines[c].write(w.ghost);
                        }
                        CoreReq::Evict => {}
                    },
                    ReqOutcome::Issued(sends) => {
                        for Send { to, msg } in sends {
                            w.push(c, to, msg);
                        }
                    }
                }
                let label = format!("core {c}: {req:?}");
                out.push((label.clone(), w.check_invariants().map(|()| w)));
            }
        }
        for &(f, t) in self.chans.keys() {
            let mut w = self.clone();
            let label = format!("deliver {f}->{t}");
            match w.deliver(f, t) {
                Ok(()) => out.push((label.clone(), w.check_invariants().map(|()| w))),
                Err(bug) => out.push((label, Err(bug))),
            }
        }
    }

    fn quiescent(&self) -> bool {
        self.chans.is_empty()
            && !self.dir.is_busy()
            && self.dir.queue_len() == 0
            && self
                .lines
                .iter()
                .all(|l| l.state.is_stable() && l.pending().is_none())
    }

    fn observe(&self, stable: &mut BTreeSet<Mesi>, all: &mut BTreeSet<Mesi>) {
        for l in &self.lines {
            all.insert(l.state);
            if l.state.is_stable() {
                stable.insert(l.state);
            }
        }
    }
}

// ------------------------------------------------------------------- snoopy

#[derive(Clone, PartialEq, Eq, Hash)]
struct SnoopWorld {
    lines: Vec<SnoopLine<u8>>,
    llc: u8,
    ghost: u8,
    evictions: bool,
    inject: Inject,
}

impl SnoopWorld {
    fn check_invariants(&self) -> Result<(), FoundBug> {
        let exclusive: Vec<usize> =
            (0..self.lines.len()).filter(|&c| self.lines[c].state.is_exclusive()).collect();
        if exclusive.len() > 1 {
            return Err(FoundBug::Swmr(format!("cores {exclusive:?} both own the line")));
        }
        if let Some(&owner) = exclusive.first() {
            for (c, l) in self.lines.iter().enumerate() {
                if c != owner && l.state.can_read() {
                    return Err(FoundBug::Swmr(format!(
                        "core {owner} is {} while core {c} still reads in {}",
                        self.lines[owner].state, l.state
                    )));
                }
            }
        }
        for (c, l) in self.lines.iter().enumerate() {
            if l.state.can_read() && l.data != Some(self.ghost) {
                return Err(FoundBug::Data(format!(
                    "core {c} ({}) caches {:?}, last store wrote {}",
                    l.state, l.data, self.ghost
                )));
            }
        }
        let owned = self
            .lines
            .iter()
            .any(|l| matches!(l.state, Mesi::M | Mesi::MiA));
        if !owned && self.llc != self.ghost {
            return Err(FoundBug::Data(format!(
                "no owner but LLC holds {} while last store wrote {}",
                self.llc, self.ghost
            )));
        }
        Ok(())
    }

    /// Grant core `c`'s queued transaction: atomic snoop across all lines.
    fn grant(&mut self, c: usize, txn: SnoopTxn) -> Result<(), FoundBug> {
        let mut shared = false;
        let mut supplied: Option<u8> = None;
        for o in 0..self.lines.len() {
            if o == c {
                continue;
            }
            if self.inject == Inject::IgnoreInv && o == self.lines.len() - 1 {
                // Buggy snooper: pretends to invalidate on GetM but keeps S.
                if txn == SnoopTxn::GetM && self.lines[o].state == Mesi::S {
                    shared = true;
                    continue;
                }
            }
            let r = self.lines[o].snoop_other(txn);
            shared |= r.keeps_copy;
            if let Some(v) = r.supplied {
                debug_assert!(supplied.is_none(), "single owner supplies");
                supplied = Some(v);
                self.llc = v; // supply flushes through to the LLC
            }
        }
        match txn {
            SnoopTxn::PutM => {
                let val = self.lines[c].putm_data().expect("MI_A holds data");
                self.llc = val;
                self.lines[c].own_grant(SnoopTxn::PutM, shared, None);
            }
            SnoopTxn::GetS | SnoopTxn::GetM => {
                let fill = supplied.unwrap_or(self.llc);
                match self.lines[c].own_grant(txn, shared, Some(fill)) {
                    Completed::Load(v) => {
                        if v != self.ghost {
                            return Err(FoundBug::Data(format!(
                                "core {c} fill returned {v}, last store wrote {}",
                                self.ghost
                            )));
                        }
                    }
                    Completed::StorePermission => {
                        self.ghost = next_ghost(self.ghost);
                        self.lines[c].write(self.ghost);
                    }
                    Completed::EvictDone => unreachable!(),
                }
            }
        }
        Ok(())
    }
}

impl World for SnoopWorld {
    fn successors(&self, out: &mut Vec<(String, Result<Self, FoundBug>)>) {
        let reqs: &[CoreReq] = if self.evictions {
            &[CoreReq::Load, CoreReq::Store, CoreReq::Evict]
        } else {
            &[CoreReq::Load, CoreReq::Store]
        };
        for c in 0..self.lines.len() {
            for &req in reqs {
                let mut w = self.clone();
                match w.lines[c].core_req(req) {
                    ReqOutcome::Stall => continue,
                    ReqOutcome::Done(_) => match req {
                        CoreReq::Load => {
                            let v = w.lines[c].data;
                            if v != Some(w.ghost) {
                                out.push((
                                    format!("core {c}: load hit"),
                                    Err(FoundBug::Data(format!(
                                        "core {c} load hit returned {v:?}, last store wrote {}",
                                        w.ghost
                                    ))),
                                ));
                                continue;
                            }
                        }
                        CoreReq::Store => {
                            w.ghost = next_ghost(w.ghost);
                            w.lines[c].write(w.ghost);
                        }
                        CoreReq::Evict => {}
                    },
                    ReqOutcome::Issued(_) => {}
                }
                out.push((format!("core {c}: {req:?}"), w.check_invariants().map(|()| w)));
            }
        }
        // Bus arbitration: any pending transaction may be granted next.
        for c in 0..self.lines.len() {
            if let Some(txn) = self.lines[c].queued_txn() {
                let mut w = self.clone();
                let label = format!("grant core {c}: {txn:?}");
                match w.grant(c, txn) {
                    Ok(()) => out.push((label.clone(), w.check_invariants().map(|()| w))),
                    Err(bug) => out.push((label, Err(bug))),
                }
            }
        }
    }

    fn quiescent(&self) -> bool {
        self.lines
            .iter()
            .all(|l| l.state.is_stable() && l.pending().is_none())
    }

    fn observe(&self, stable: &mut BTreeSet<Mesi>, all: &mut BTreeSet<Mesi>) {
        for l in &self.lines {
            all.insert(l.state);
            if l.state.is_stable() {
                stable.insert(l.state);
            }
        }
    }
}

/// Run the exhaustive check for one block under the given configuration.
pub fn check(config: &CheckConfig) -> Result<CheckReport, CheckError> {
    if config.cores == 0 {
        return Err(CheckError::BadConfig("need at least one core".into()));
    }
    match config.variant {
        Variant::Directory => {
            let start = DirWorld {
                lines: vec![CacheLine::default(); config.cores],
                dir: DirLine::new(0),
                chans: BTreeMap::new(),
                ghost: 0,
                evictions: config.evictions,
                inject: config.inject,
            };
            explore(start, config.max_states)
        }
        Variant::Snoopy => {
            if config.inject == Inject::DropWbAck {
                return Err(CheckError::BadConfig(
                    "DropWbAck applies to the directory variant only".into(),
                ));
            }
            let start = SnoopWorld {
                lines: vec![SnoopLine::default(); config.cores],
                llc: 0,
                ghost: 0,
                evictions: config.evictions,
                inject: config.inject,
            };
            explore(start, config.max_states)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_core_snoopy_reaches_exactly_i_e_m() {
        let r = check(&CheckConfig::new(Variant::Snoopy, 1)).unwrap();
        // Alone, fills are always exclusive: S is unreachable.
        assert_eq!(r.stable_set, [Mesi::I, Mesi::E, Mesi::M].into());
        assert!(r.quiescent_states > 0);
    }

    #[test]
    fn two_core_snoopy_reaches_all_of_mesi() {
        let r = check(&CheckConfig::new(Variant::Snoopy, 2)).unwrap();
        assert_eq!(r.stable_set, [Mesi::I, Mesi::S, Mesi::E, Mesi::M].into());
        assert!(r.observed.contains(&Mesi::SmAd));
        assert!(r.observed.contains(&Mesi::MiA));
    }

    #[test]
    fn directory_never_grants_exclusive() {
        let r = check(&CheckConfig::new(Variant::Directory, 2)).unwrap();
        assert_eq!(r.stable_set, [Mesi::I, Mesi::S, Mesi::M].into());
        assert!(!r.observed.contains(&Mesi::E));
        assert!(!r.observed.contains(&Mesi::IsAd));
    }

    #[test]
    fn directory_races_exercise_the_transient_states() {
        let r = check(&CheckConfig::new(Variant::Directory, 2)).unwrap();
        for s in [
            Mesi::IsD,
            Mesi::IsDI,
            Mesi::ImAd,
            Mesi::ImA,
            Mesi::SmAd,
            Mesi::MiA,
            Mesi::IiA,
        ] {
            assert!(r.observed.contains(&s), "never reached {s}");
        }
    }

    #[test]
    fn directory_without_evictions_still_covers_sharing() {
        let mut cfg = CheckConfig::new(Variant::Directory, 2);
        cfg.evictions = false;
        let r = check(&cfg).unwrap();
        assert!(r.stable_set.contains(&Mesi::S));
        assert!(r.stable_set.contains(&Mesi::M));
    }

    #[test]
    fn three_core_directory_passes_without_evictions() {
        let mut cfg = CheckConfig::new(Variant::Directory, 3);
        cfg.evictions = false;
        let r = check(&cfg).unwrap();
        assert!(r.states > 1000, "expected a substantial space, got {}", r.states);
    }

    #[test]
    fn ignoring_invalidations_breaks_swmr_in_the_directory() {
        let mut cfg = CheckConfig::new(Variant::Directory, 2);
        cfg.inject = Inject::IgnoreInv;
        match check(&cfg) {
            Err(CheckError::Swmr { trace, .. }) => assert!(!trace.is_empty()),
            other => panic!("expected SWMR counterexample, got {other:?}"),
        }
    }

    #[test]
    fn ignoring_invalidations_breaks_snoopy_too() {
        let mut cfg = CheckConfig::new(Variant::Snoopy, 2);
        cfg.inject = Inject::IgnoreInv;
        match check(&cfg) {
            Err(CheckError::Swmr { trace, .. }) | Err(CheckError::DataValue { trace, .. }) => {
                assert!(!trace.is_empty())
            }
            other => panic!("expected a counterexample, got {other:?}"),
        }
    }

    #[test]
    fn dropped_writeback_acks_wedge_the_evictor() {
        let mut cfg = CheckConfig::new(Variant::Directory, 2);
        cfg.inject = Inject::DropWbAck;
        match check(&cfg) {
            Err(CheckError::Stuck { trace }) => assert!(!trace.is_empty()),
            other => panic!("expected a stuck state, got {other:?}"),
        }
    }

    #[test]
    fn snoopy_rejects_directory_only_injection() {
        let mut cfg = CheckConfig::new(Variant::Snoopy, 2);
        cfg.inject = Inject::DropWbAck;
        assert!(matches!(check(&cfg), Err(CheckError::BadConfig(_))));
    }

    #[test]
    fn traces_replay_from_the_initial_state() {
        let mut cfg = CheckConfig::new(Variant::Directory, 2);
        cfg.inject = Inject::IgnoreInv;
        let err = check(&cfg).unwrap_err();
        let trace = err.trace();
        assert!(!trace.is_empty());
        // A useful counterexample names concrete actors.
        assert!(trace.iter().any(|s| s.contains("core")));
    }
}
