//! MESI coherence protocol transition tables, pure of any timing model.
//!
//! Two variants share the [`Mesi`] state space:
//!
//! * **Directory** ([`CacheLine`] + [`DirLine`]): message-passing over
//!   point-to-point channels. The directory grants S on every GetS (E is never
//!   granted here), forwards GetS/GetM to the owner, and blocks per block
//!   while an owner copy is in flight. Invalidations name the requester so
//!   InvAcks flow directly to it; the requester counts acks against the total
//!   carried by its Data reply.
//! * **Snoopy** ([`SnoopLine`]): transactions snoop atomically at bus-grant
//!   time, so transient states only cover the arbitration window. The shared
//!   wire decides S vs E on fills, and E upgrades to M silently — the MESI
//!   point: private lines never pay a bus transaction to become writable.
//!
//! The same tables drive both the cycle-level hierarchy (unit data payloads,
//! values live in a flat store) and the exhaustive model checker (small ghost
//! payloads, values verified end to end). Invariant: a single writer (one E/M,
//! nothing else valid) or many readers; the checker proves it for every
//! reachable interleaving.

use std::collections::{BTreeSet, VecDeque};
use std::fmt;

pub type CoreId = usize;

/// Cache line state, stable and transient, across both protocol variants.
/// Naming: `XY_W` = moving from X to Y, waiting on W (D = data, A = acks or
/// the bus grant / writeback ack).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Mesi {
    I,
    S,
    E,
    M,
    /// Directory: I -> S, waiting for data.
    IsD,
    /// Directory: I -> S fill that was invalidated mid-flight; the load
    /// completes with the incoming data, then the line drops to I.
    IsDI,
    /// Waiting for data + acks (directory) or the bus grant (snoopy).
    ImAd,
    /// Directory: data arrived, still counting InvAcks.
    ImA,
    SmAd,
    SmA,
    /// Dirty eviction awaiting writeback ack (directory) or grant (snoopy).
    MiA,
    /// Ownership handed away while the writeback was in flight.
    IiA,
    /// Snoopy: I -> S/E, waiting for the bus grant.
    IsAd,
}

impl Mesi {
    pub fn is_stable(self) -> bool {
        matches!(self, Mesi::I | Mesi::S | Mesi::E | Mesi::M)
    }

    /// Line holds data a load may use right now.
    pub fn can_read(self) -> bool {
        matches!(self, Mesi::S | Mesi::E | Mesi::M)
    }

    pub fn can_write(self) -> bool {
        self == Mesi::M
    }

    /// Counts toward the single-writer side of the SWMR invariant.
    pub fn is_exclusive(self) -> bool {
        matches!(self, Mesi::E | Mesi::M)
    }
}

impl fmt::Display for Mesi {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Mesi::I => "I",
            Mesi::S => "S",
            Mesi::E => "E",
            Mesi::M => "M",
            Mesi::IsD => "IS_D",
            Mesi::IsDI => "IS_D_I",
            Mesi::ImAd => "IM_AD",
            Mesi::ImA => "IM_A",
            Mesi::SmAd => "SM_AD",
            Mesi::SmA => "SM_A",
            Mesi::MiA => "MI_A",
            Mesi::IiA => "II_A",
            Mesi::IsAd => "IS_AD",
        };
        write!(f, "{s}")
    }
}

/// The nine directory-protocol message types. `D` is the data payload: ghost
/// values in the checker, `()` in the cycle simulator (which keeps values in
/// a flat store).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Msg<D> {
    GetS,
    GetM,
    /// Dirty (or clean-exclusive) writeback carrying the block.
    PutM(D),
    FwdGetS { req: CoreId },
    FwdGetM { req: CoreId },
    Inv { req: CoreId },
    InvAck,
    /// Fill or owner copy; `acks` = InvAcks the requester must collect.
    Data { val: D, acks: u32 },
    WBAck,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum To {
    Dir,
    Cache(CoreId),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Send<D> {
    pub to: To,
    pub msg: Msg<D>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CoreReq {
    Load,
    Store,
    Evict,
}

/// How a core request landed on the cache controller.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ReqOutcome<D> {
    /// Load hit (value) or store/evict needing no transaction.
    Done(Option<D>),
    /// Miss: transaction issued, completion arrives via [`Step::completed`].
    Issued(Vec<Send<D>>),
    /// Line is mid-transaction; retry later.
    Stall,
}

/// A finished pending request, reported when the final message lands.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Completed<D> {
    Load(D),
    /// Write permission granted; the driver stores via [`CacheLine::write`].
    StorePermission,
    EvictDone,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Step<D> {
    pub sends: Vec<Send<D>>,
    pub completed: Option<Completed<D>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProtocolError {
    pub who: String,
    pub state: String,
    pub msg: String,
}

impl fmt::Display for ProtocolError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} in state {} cannot handle {}", self.who, self.state, self.msg)
    }
}

/// Per-core, per-block directory-protocol cache controller.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CacheLine<D> {
    pub state: Mesi,
    pub data: Option<D>,
    pending: Option<CoreReq>,
    /// Total acks owed, known once Data arrives.
    acks_needed: Option<u32>,
    acks_got: u32,
    /// A forward that arrived before we completed our own GetM; replayed via
    /// [`CacheLine::take_deferred`] once stable. At most one can exist: the
    /// directory serializes ownership transfers per block.
    deferred: Option<(CoreId, Msg<D>)>,
}

impl<D: Clone> Default for CacheLine<D> {
    fn default() -> Self {
        CacheLine {
            state: Mesi::I,
            data: None,
            pending: None,
            acks_needed: None,
            acks_got: 0,
            deferred: None,
        }
    }
}

impl<D: Clone> CacheLine<D> {
    pub fn pending(&self) -> Option<CoreReq> {
        self.pending
    }

    /// Store data into an M line (driver-side write after StorePermission, or
    /// a plain store hit).
    pub fn write(&mut self, val: D) {
        debug_assert_eq!(self.state, Mesi::M);
        self.data = Some(val);
    }

    /// Pop a deferred forward once the line has reached M.
    pub fn take_deferred(&mut self) -> Option<(CoreId, Msg<D>)> {
        if self.state == Mesi::M {
            self.deferred.take()
        } else {
            None
        }
    }

    pub fn core_req(&mut self, req: CoreReq) -> ReqOutcome<D> {
        if self.pending.is_some() || !self.state.is_stable() {
            return ReqOutcome::Stall;
        }
        match (req, self.state) {
            (CoreReq::Load, s) if s.can_read() => {
                ReqOutcome::Done(Some(self.data.clone().expect("readable line has data")))
            }
            (CoreReq::Load, Mesi::I) => {
                self.state = Mesi::IsD;
                self.pending = Some(CoreReq::Load);
                ReqOutcome::Issued(vec![Send { to: To::Dir, msg: Msg::GetS }])
            }
            (CoreReq::Store, Mesi::M) => ReqOutcome::Done(None),
            (CoreReq::Store, Mesi::E) => {
                // Silent upgrade; snoopy-only in practice (the directory
                // variant never grants E) but harmless to keep total.
                self.state = Mesi::M;
                ReqOutcome::Done(None)
            }
            (CoreReq::Store, Mesi::S) => {
                self.state = Mesi::SmAd;
                self.pending = Some(CoreReq::Store);
                ReqOutcome::Issued(vec![Send { to: To::Dir, msg: Msg::GetM }])
            }
            (CoreReq::Store, Mesi::I) => {
                self.state = Mesi::ImAd;
                self.pending = Some(CoreReq::Store);
                ReqOutcome::Issued(vec![Send { to: To::Dir, msg: Msg::GetM }])
            }
            (CoreReq::Evict, Mesi::M | Mesi::E) => {
                // Keep the copy: MI_A must still serve racing forwards.
                let val = self.data.clone().expect("owned line has data");
                self.state = Mesi::MiA;
                self.pending = Some(CoreReq::Evict);
                ReqOutcome::Issued(vec![Send { to: To::Dir, msg: Msg::PutM(val) }])
            }
            (CoreReq::Evict, Mesi::S) => {
                // Silent: the directory's sharer list goes stale; stale Inv
                // messages are answered from I below.
                self.state = Mesi::I;
                self.data = None;
                ReqOutcome::Done(None)
            }
            (CoreReq::Evict, Mesi::I) => ReqOutcome::Done(None),
            _ => unreachable!("stable states covered"),
        }
    }

    fn complete_store_if_ready(&mut self, step: &mut Step<D>) {
        if self.data.is_some() && self.acks_needed == Some(self.acks_got) {
            self.state = Mesi::M;
            self.acks_needed = None;
            self.acks_got = 0;
            self.pending = None;
            step.completed = Some(Completed::StorePermission);
        }
    }

    pub fn msg(&mut self, from: CoreId, msg: Msg<D>) -> Result<Step<D>, ProtocolError> {
        let mut step = Step { sends: Vec::new(), completed: None };
        let err = |state: Mesi, m: &Msg<D>| {
            Err(ProtocolError {
                who: "cache".into(),
                state: state.to_string(),
                msg: format!("{}", MsgName(m)),
            })
        };
        match msg {
            Msg::Data { val, acks } => match self.state {
                Mesi::IsD => {
                    self.data = Some(val.clone());
                    self.state = Mesi::S;
                    self.pending = None;
                    step.completed = Some(Completed::Load(val));
                }
                Mesi::IsDI => {
                    // Fill arrived after an invalidation: serve the load once
                    // (it serialized before the writer) and drop the line.
                    self.state = Mesi::I;
                    self.data = None;
                    self.pending = None;
                    step.completed = Some(Completed::Load(val));
                }
                Mesi::ImAd | Mesi::SmAd => {
                    self.data = Some(val);
                    self.acks_needed = Some(acks);
                    self.complete_store_if_ready(&mut step);
                    if step.completed.is_none() {
                        self.state = if self.state == Mesi::ImAd { Mesi::ImA } else { Mesi::SmA };
                    }
                }
                s => return err(s, &Msg::Data { val, acks }),
            },
            Msg::InvAck => {
                self.acks_got += 1;
                match self.state {
                    Mesi::ImAd | Mesi::SmAd => {}
                    Mesi::ImA | Mesi::SmA => self.complete_store_if_ready(&mut step),
                    s => return err(s, &Msg::InvAck),
                }
            }
            Msg::Inv { req } => {
                let ack = Send { to: To::Cache(req), msg: Msg::InvAck };
                match self.state {
                    Mesi::S => {
                        self.state = Mesi::I;
                        self.data = None;
                        step.sends.push(ack);
                    }
                    Mesi::SmAd => {
                        // Upgrade lost its base copy; refill as a plain GetM.
                        self.state = Mesi::ImAd;
                        self.data = None;
                        step.sends.push(ack);
                    }
                    Mesi::IsD => {
                        self.state = Mesi::IsDI;
                        step.sends.push(ack);
                    }
                    // Stale invalidations: silently dropped sharer listings,
                    // or (IS_D_I) a second writer epoch invalidating a fill
                    // that is already marked dead. Ack and carry on.
                    Mesi::I | Mesi::ImAd | Mesi::IiA | Mesi::IsDI => step.sends.push(ack),
                    s => return err(s, &Msg::Inv { req }),
                }
            }
            Msg::FwdGetS { req } => match self.state {
                Mesi::M => {
                    let val = self.data.clone().expect("M has data");
                    step.sends.push(Send {
                        to: To::Cache(req),
                        msg: Msg::Data { val: val.clone(), acks: 0 },
                    });
                    step.sends.push(Send { to: To::Dir, msg: Msg::Data { val, acks: 0 } });
                    self.state = Mesi::S;
                }
                Mesi::MiA => {
                    // Eviction raced the forward: serve it, let the stale
                    // PutM bounce off the directory as a non-owner.
                    let val = self.data.take().expect("MI_A retains data");
                    step.sends.push(Send {
                        to: To::Cache(req),
                        msg: Msg::Data { val: val.clone(), acks: 0 },
                    });
                    step.sends.push(Send { to: To::Dir, msg: Msg::Data { val, acks: 0 } });
                    self.state = Mesi::IiA;
                }
                Mesi::ImAd | Mesi::ImA | Mesi::SmAd | Mesi::SmA => {
                    debug_assert!(self.deferred.is_none(), "one transfer in flight per block");
                    self.deferred = Some((from, Msg::FwdGetS { req }));
                }
                s => return err(s, &Msg::FwdGetS { req }),
            },
            Msg::FwdGetM { req } => match self.state {
                Mesi::M => {
                    let val = self.data.take().expect("M has data");
                    step.sends
                        .push(Send { to: To::Cache(req), msg: Msg::Data { val, acks: 0 } });
                    self.state = Mesi::I;
                }
                Mesi::MiA => {
                    let val = self.data.take().expect("MI_A retains data");
                    step.sends
                        .push(Send { to: To::Cache(req), msg: Msg::Data { val, acks: 0 } });
                    self.state = Mesi::IiA;
                }
                Mesi::ImAd | Mesi::ImA | Mesi::SmAd | Mesi::SmA => {
                    debug_assert!(self.deferred.is_none(), "one transfer in flight per block");
                    self.deferred = Some((from, Msg::FwdGetM { req }));
                }
                s => return err(s, &Msg::FwdGetM { req }),
            },
            Msg::WBAck => match self.state {
                Mesi::MiA | Mesi::IiA => {
                    self.state = Mesi::I;
                    self.data = None;
                    self.pending = None;
                    step.completed = Some(Completed::EvictDone);
                }
                s => return err(s, &Msg::WBAck),
            },
            m @ (Msg::GetS | Msg::GetM | Msg::PutM(_)) => return err(self.state, &m),
        }
        Ok(step)
    }
}

/// Directory entry state for one block.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum DirState {
    /// Uncached anywhere; memory is authoritative.
    U,
    S(BTreeSet<CoreId>),
    M(CoreId),
    /// Owner's copy is in flight after a FwdGetS; requests queue until the
    /// data lands, then the block becomes S(`sharers`).
    Busy { sharers: BTreeSet<CoreId> },
}

/// Directory controller plus backing memory for one block.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct DirLine<D> {
    pub state: DirState,
    pub mem: D,
    queue: VecDeque<(CoreId, Msg<D>)>,
}

impl<D: Clone> DirLine<D> {
    pub fn new(initial: D) -> Self {
        DirLine { state: DirState::U, mem: initial, queue: VecDeque::new() }
    }

    pub fn is_busy(&self) -> bool {
        matches!(self.state, DirState::Busy { .. })
    }

    pub fn queue_len(&self) -> usize {
        self.queue.len()
    }

    pub fn msg(&mut self, from: CoreId, msg: Msg<D>) -> Result<Vec<Send<D>>, ProtocolError> {
        let mut sends = Vec::new();
        if self.is_busy() && !matches!(msg, Msg::Data { .. }) {
            self.queue.push_back((from, msg));
            return Ok(sends);
        }
        self.process(from, msg, &mut sends)?;
        // Draining after Busy resolves; stop if the head re-blocks.
        while !self.is_busy() {
            match self.queue.pop_front() {
                Some((f, m)) => self.process(f, m, &mut sends)?,
                None => break,
            }
        }
        Ok(sends)
    }

    fn process(
        &mut self,
        from: CoreId,
        msg: Msg<D>,
        sends: &mut Vec<Send<D>>,
    ) -> Result<(), ProtocolError> {
        let err = |state: &DirState, m: &Msg<D>| {
            Err(ProtocolError {
                who: "directory".into(),
                state: format!("{state:?}"),
                msg: format!("{}", MsgName(m)),
            })
        };
        let data_to = |to: CoreId, val: D, acks: u32| Send {
            to: To::Cache(to),
            msg: Msg::Data { val, acks },
        };
        match msg {
            Msg::GetS => match &self.state {
                DirState::U => {
                    sends.push(data_to(from, self.mem.clone(), 0));
                    self.state = DirState::S([from].into());
                }
                DirState::S(sh) => {
                    let mut sh = sh.clone();
                    sh.insert(from);
                    sends.push(data_to(from, self.mem.clone(), 0));
                    self.state = DirState::S(sh);
                }
                DirState::M(owner) => {
                    sends.push(Send {
                        to: To::Cache(*owner),
                        msg: Msg::FwdGetS { req: from },
                    });
                    self.state = DirState::Busy { sharers: [*owner, from].into() };
                }
                DirState::Busy { .. } => unreachable!("queued above"),
            },
            Msg::GetM => match &self.state {
                DirState::U => {
                    sends.push(data_to(from, self.mem.clone(), 0));
                    self.state = DirState::M(from);
                }
                DirState::S(sh) => {
                    let others: Vec<CoreId> = sh.iter().copied().filter(|&c| c != from).collect();
                    for &c in &others {
                        sends.push(Send { to: To::Cache(c), msg: Msg::Inv { req: from } });
                    }
                    sends.push(data_to(from, self.mem.clone(), others.len() as u32));
                    self.state = DirState::M(from);
                }
                DirState::M(owner) => {
                    debug_assert_ne!(*owner, from, "owner never re-requests M");
                    sends.push(Send {
                        to: To::Cache(*owner),
                        msg: Msg::FwdGetM { req: from },
                    });
                    self.state = DirState::M(from);
                }
                DirState::Busy { .. } => unreachable!("queued above"),
            },
            Msg::PutM(val) => {
                let owns = matches!(&self.state, DirState::M(owner) if *owner == from);
                if owns {
                    self.mem = val;
                    self.state = DirState::U;
                }
                // Non-owner PutM (ownership already handed away): ack without
                // absorbing the stale data.
                sends.push(Send { to: To::Cache(from), msg: Msg::WBAck });
            }
            Msg::Data { val, .. } => match &self.state {
                DirState::Busy { sharers } => {
                    self.mem = val;
                    self.state = DirState::S(sharers.clone());
                }
                s => return err(s, &Msg::Data { val, acks: 0 }),
            },
            m => return err(&self.state, &m),
        }
        Ok(())
    }
}

/// Bus transaction kinds for the snoopy variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SnoopTxn {
    GetS,
    GetM,
    PutM,
}

/// What a non-requesting line does when a transaction is granted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SnoopReaction<D> {
    /// Owner-supplied block (also freshens the shared LLC image).
    pub supplied: Option<D>,
    /// Line still holds a valid copy afterward (drives the shared wire).
    pub keeps_copy: bool,
    /// Requester's queued PutM became moot and must leave the arbiter.
    pub cancel_putm: bool,
}

/// Per-core, per-block snoopy controller. Transients exist only between
/// enqueueing a transaction and winning arbitration.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SnoopLine<D> {
    pub state: Mesi,
    pub data: Option<D>,
    pending: Option<CoreReq>,
}

impl<D: Clone> Default for SnoopLine<D> {
    fn default() -> Self {
        SnoopLine { state: Mesi::I, data: None, pending: None }
    }
}

impl<D: Clone> SnoopLine<D> {
    pub fn pending(&self) -> Option<CoreReq> {
        self.pending
    }

    pub fn write(&mut self, val: D) {
        debug_assert_eq!(self.state, Mesi::M);
        self.data = Some(val);
    }

    /// `Done` = no bus needed; `Issued` = the named transaction must win the
    /// bus, after which the driver calls [`SnoopLine::own_grant`].
    pub fn core_req(&mut self, req: CoreReq) -> ReqOutcome<SnoopTxn> {
        if self.pending.is_some() || !self.state.is_stable() {
            return ReqOutcome::Stall;
        }
        match (req, self.state) {
            (CoreReq::Load, s) if s.can_read() => ReqOutcome::Done(None),
            (CoreReq::Load, Mesi::I) => {
                self.state = Mesi::IsAd;
                self.pending = Some(CoreReq::Load);
                ReqOutcome::Issued(vec![Send { to: To::Dir, msg: Msg::GetS }])
            }
            (CoreReq::Store, Mesi::M) => ReqOutcome::Done(None),
            (CoreReq::Store, Mesi::E) => {
                self.state = Mesi::M;
                ReqOutcome::Done(None)
            }
            (CoreReq::Store, Mesi::S) => {
                self.state = Mesi::SmAd;
                self.pending = Some(CoreReq::Store);
                ReqOutcome::Issued(vec![Send { to: To::Dir, msg: Msg::GetM }])
            }
            (CoreReq::Store, Mesi::I) => {
                self.state = Mesi::ImAd;
                self.pending = Some(CoreReq::Store);
                ReqOutcome::Issued(vec![Send { to: To::Dir, msg: Msg::GetM }])
            }
            (CoreReq::Evict, Mesi::M) => {
                self.state = Mesi::MiA;
                self.pending = Some(CoreReq::Evict);
                ReqOutcome::Issued(vec![Send { to: To::Dir, msg: Msg::PutM(SnoopTxn::PutM) }])
            }
            (CoreReq::Evict, Mesi::E | Mesi::S) => {
                self.state = Mesi::I;
                self.data = None;
                ReqOutcome::Done(None)
            }
            (CoreReq::Evict, Mesi::I) => ReqOutcome::Done(None),
            _ => unreachable!("stable states covered"),
        }
    }

    /// The transaction this line is waiting to place on the bus, if any.
    pub fn queued_txn(&self) -> Option<SnoopTxn> {
        match self.state {
            Mesi::IsAd => Some(SnoopTxn::GetS),
            Mesi::ImAd | Mesi::SmAd => Some(SnoopTxn::GetM),
            Mesi::MiA => Some(SnoopTxn::PutM),
            _ => None,
        }
    }

    /// Snoop another core's granted transaction.
    pub fn snoop_other(&mut self, txn: SnoopTxn) -> SnoopReaction<D> {
        let mut r = SnoopReaction { supplied: None, keeps_copy: false, cancel_putm: false };
        match txn {
            SnoopTxn::GetS => match self.state {
                Mesi::M => {
                    r.supplied = self.data.clone();
                    self.state = Mesi::S;
                    r.keeps_copy = true;
                }
                Mesi::E | Mesi::S => {
                    self.state = Mesi::S;
                    r.keeps_copy = true;
                }
                Mesi::SmAd => r.keeps_copy = true,
                Mesi::MiA => {
                    // Still the owner: supply, drop, and cancel the queued
                    // writeback — the reader's fill freshened the LLC.
                    r.supplied = self.data.take();
                    r.cancel_putm = true;
                    self.state = Mesi::I;
                    self.pending = None;
                }
                _ => {}
            },
            SnoopTxn::GetM => match self.state {
                Mesi::M | Mesi::E => {
                    if self.state == Mesi::M {
                        r.supplied = self.data.take();
                    }
                    self.state = Mesi::I;
                    self.data = None;
                }
                Mesi::S => {
                    self.state = Mesi::I;
                    self.data = None;
                }
                Mesi::SmAd => {
                    // Lost the base copy; the queued GetM now performs a full
                    // fill at its own grant.
                    self.state = Mesi::ImAd;
                    self.data = None;
                }
                Mesi::MiA => {
                    r.supplied = self.data.take();
                    r.cancel_putm = true;
                    self.state = Mesi::I;
                    self.pending = None;
                }
                _ => {}
            },
            SnoopTxn::PutM => {}
        }
        r
    }

    /// Complete this line's own granted transaction. `shared` is the wire-OR
    /// of other lines' `keeps_copy`; `fill` is the block from the owner or
    /// the LLC.
    pub fn own_grant(&mut self, txn: SnoopTxn, shared: bool, fill: Option<D>) -> Completed<D> {
        match txn {
            SnoopTxn::GetS => {
                debug_assert_eq!(self.state, Mesi::IsAd);
                self.state = if shared { Mesi::S } else { Mesi::E };
                self.data = fill.clone();
                self.pending = None;
                Completed::Load(fill.expect("fill data"))
            }
            SnoopTxn::GetM => {
                debug_assert!(matches!(self.state, Mesi::ImAd | Mesi::SmAd));
                self.state = Mesi::M;
                self.data = fill;
                self.pending = None;
                Completed::StorePermission
            }
            SnoopTxn::PutM => {
                debug_assert_eq!(self.state, Mesi::MiA);
                self.state = Mesi::I;
                self.data = None;
                self.pending = None;
                Completed::EvictDone
            }
        }
    }

    /// Block to flush to the LLC when this line's PutM wins the bus.
    pub fn putm_data(&mut self) -> Option<D> {
        debug_assert_eq!(self.state, Mesi::MiA);
        self.data.clone()
    }
}

struct MsgName<'a, D>(&'a Msg<D>);

impl<D> fmt::Display for MsgName<'_, D> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self.0 {
            Msg::GetS => "GetS",
            Msg::GetM => "GetM",
            Msg::PutM(_) => "PutM",
            Msg::FwdGetS { .. } => "FwdGetS",
            Msg::FwdGetM { .. } => "FwdGetM",
            Msg::Inv { .. } => "Inv",
            Msg::InvAck => "InvAck",
            Msg::Data { .. } => "Data",
            Msg::WBAck => "WBAck",
        };
        write!(f, "{s}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn issued<D>(o: ReqOutcome<D>) -> Vec<Send<D>> {
        match o {
            ReqOutcome::Issued(s) => s,
            other => panic!("expected Issued, got {:?}", kind(&other)),
        }
    }

    fn kind<D>(o: &ReqOutcome<D>) -> &'static str {
        match o {
            ReqOutcome::Done(_) => "Done",
            ReqOutcome::Issued(_) => "Issued",
            ReqOutcome::Stall => "Stall",
        }
    }

    #[test]
    fn directory_cold_load_fills_shared() {
        let mut dir: DirLine<u8> = DirLine::new(42);
        let mut line: CacheLine<u8> = CacheLine::default();
        let sends = issued(line.core_req(CoreReq::Load));
        assert_eq!(sends, vec![Send { to: To::Dir, msg: Msg::GetS }]);
        assert_eq!(line.state, Mesi::IsD);

        let replies = dir.msg(0, Msg::GetS).unwrap();
        assert_eq!(
            replies,
            vec![Send { to: To::Cache(0), msg: Msg::Data { val: 42, acks: 0 } }]
        );
        assert_eq!(dir.state, DirState::S([0].into()));

        let step = line.msg(usize::MAX, Msg::Data { val: 42, acks: 0 }).unwrap();
        assert_eq!(step.completed, Some(Completed::Load(42)));
        // The directory variant never grants E.
        assert_eq!(line.state, Mesi::S);
    }

    #[test]
    fn directory_store_invalidates_sharers_and_counts_acks() {
        let mut dir: DirLine<u8> = DirLine::new(0);
        // Cores 0 and 1 share the block.
        dir.state = DirState::S([0, 1].into());
        let mut writer: CacheLine<u8> = CacheLine::default();
        issued(writer.core_req(CoreReq::Store));

        let sends = dir.msg(2, Msg::GetM).unwrap();
        assert_eq!(sends.len(), 3); // Inv x2 + Data(acks=2)
        assert!(sends.contains(&Send { to: To::Cache(0), msg: Msg::Inv { req: 2 } }));
        assert!(sends.contains(&Send { to: To::Cache(1), msg: Msg::Inv { req: 2 } }));
        assert!(sends
            .contains(&Send { to: To::Cache(2), msg: Msg::Data { val: 0, acks: 2 } }));
        assert_eq!(dir.state, DirState::M(2));

        // Acks may arrive before Data.
        assert_eq!(writer.msg(0, Msg::InvAck).unwrap().completed, None);
        assert_eq!(writer.msg(1, Msg::InvAck).unwrap().completed, None);
        let step = writer.msg(usize::MAX, Msg::Data { val: 0, acks: 2 }).unwrap();
        assert_eq!(step.completed, Some(Completed::StorePermission));
        assert_eq!(writer.state, Mesi::M);
        writer.write(7);
        assert_eq!(writer.data, Some(7));
    }

    #[test]
    fn sharer_invalidation_acks_the_requester() {
        let mut sharer: CacheLine<u8> = CacheLine::default();
        sharer.state = Mesi::S;
        sharer.data = Some(3);
        let step = sharer.msg(usize::MAX, Msg::Inv { req: 5 }).unwrap();
        assert_eq!(step.sends, vec![Send { to: To::Cache(5), msg: Msg::InvAck }]);
        assert_eq!(sharer.state, Mesi::I);
        assert_eq!(sharer.data, None);
    }

    #[test]
    fn fill_invalidated_mid_flight_serves_load_once_then_drops() {
        let mut line: CacheLine<u8> = CacheLine::default();
        issued(line.core_req(CoreReq::Load));
        let step = line.msg(usize::MAX, Msg::Inv { req: 3 }).unwrap();
        assert_eq!(step.sends, vec![Send { to: To::Cache(3), msg: Msg::InvAck }]);
        assert_eq!(line.state, Mesi::IsDI);
        let step = line.msg(usize::MAX, Msg::Data { val: 9, acks: 0 }).unwrap();
        assert_eq!(step.completed, Some(Completed::Load(9)));
        assert_eq!(line.state, Mesi::I);
    }

    #[test]
    fn owner_serves_forwarded_gets_and_copies_to_directory() {
        let mut owner: CacheLine<u8> = CacheLine::default();
        owner.state = Mesi::M;
        owner.data = Some(11);
        let step = owner.msg(usize::MAX, Msg::FwdGetS { req: 4 }).unwrap();
        assert_eq!(step.sends.len(), 2);
        assert_eq!(
            step.sends[0],
            Send { to: To::Cache(4), msg: Msg::Data { val: 11, acks: 0 } }
        );
        assert_eq!(step.sends[1], Send { to: To::Dir, msg: Msg::Data { val: 11, acks: 0 } });
        assert_eq!(owner.state, Mesi::S);
    }

    #[test]
    fn directory_blocks_during_owner_copy_and_drains_after() {
        let mut dir: DirLine<u8> = DirLine::new(0);
        dir.state = DirState::M(0);
        let sends = dir.msg(1, Msg::GetS).unwrap();
        assert_eq!(sends, vec![Send { to: To::Cache(0), msg: Msg::FwdGetS { req: 1 } }]);
        assert!(dir.is_busy());

        // A GetM arriving while busy queues rather than interleaving.
        assert_eq!(dir.msg(2, Msg::GetM).unwrap(), vec![]);
        assert_eq!(dir.queue_len(), 1);

        // Owner copy lands: block becomes S{0,1}, then the queued GetM runs.
        let sends = dir.msg(0, Msg::Data { val: 5, acks: 0 }).unwrap();
        assert_eq!(dir.state, DirState::M(2));
        assert_eq!(dir.queue_len(), 0);
        assert_eq!(dir.mem, 5);
        assert!(sends.contains(&Send { to: To::Cache(0), msg: Msg::Inv { req: 2 } }));
        assert!(sends.contains(&Send { to: To::Cache(1), msg: Msg::Inv { req: 2 } }));
        assert!(sends
            .contains(&Send { to: To::Cache(2), msg: Msg::Data { val: 5, acks: 2 } }));
    }

    #[test]
    fn eviction_race_bounces_stale_putm() {
        let mut dir: DirLine<u8> = DirLine::new(0);
        dir.state = DirState::M(0);
        let mut owner: CacheLine<u8> = CacheLine::default();
        owner.state = Mesi::M;
        owner.data = Some(8);

        // Owner starts evicting; PutM is in flight.
        let sends = issued(owner.core_req(CoreReq::Evict));
        assert_eq!(sends, vec![Send { to: To::Dir, msg: Msg::PutM(8) }]);

        // Meanwhile the directory forwards a GetM from core 1 to the owner.
        dir.msg(1, Msg::GetM).unwrap();
        let step = owner.msg(usize::MAX, Msg::FwdGetM { req: 1 }).unwrap();
        assert_eq!(owner.state, Mesi::IiA);
        assert_eq!(
            step.sends,
            vec![Send { to: To::Cache(1), msg: Msg::Data { val: 8, acks: 0 } }]
        );

        // The stale PutM reaches the directory after ownership moved on:
        // acked, not absorbed.
        let sends = dir.msg(0, Msg::PutM(8)).unwrap();
        assert_eq!(sends, vec![Send { to: To::Cache(0), msg: Msg::WBAck }]);
        assert_eq!(dir.state, DirState::M(1));
        assert_eq!(dir.mem, 0);

        let step = owner.msg(usize::MAX, Msg::WBAck).unwrap();
        assert_eq!(step.completed, Some(Completed::EvictDone));
        assert_eq!(owner.state, Mesi::I);
    }

    #[test]
    fn forwards_defer_until_own_store_completes() {
        let mut line: CacheLine<u8> = CacheLine::default();
        issued(line.core_req(CoreReq::Store));
        // Forward for the *next* owner arrives before our Data.
        let step = line.msg(usize::MAX, Msg::FwdGetM { req: 2 }).unwrap();
        assert!(step.sends.is_empty());
        assert_eq!(line.take_deferred(), None, "not stable yet");

        let step = line.msg(usize::MAX, Msg::Data { val: 1, acks: 0 }).unwrap();
        assert_eq!(step.completed, Some(Completed::StorePermission));
        line.write(2);
        let (_, fwd) = line.take_deferred().expect("deferred forward replays");
        let step = line.msg(usize::MAX, fwd).unwrap();
        assert_eq!(
            step.sends,
            vec![Send { to: To::Cache(2), msg: Msg::Data { val: 2, acks: 0 } }]
        );
        assert_eq!(line.state, Mesi::I);
    }

    #[test]
    fn transient_lines_stall_new_core_requests() {
        let mut line: CacheLine<u8> = CacheLine::default();
        issued(line.core_req(CoreReq::Load));
        assert!(matches!(line.core_req(CoreReq::Store), ReqOutcome::Stall));
        assert!(matches!(line.core_req(CoreReq::Load), ReqOutcome::Stall));
    }

    #[test]
    fn snoopy_fill_uses_shared_wire_for_s_vs_e() {
        let mut a: SnoopLine<u8> = SnoopLine::default();
        issued(a.core_req(CoreReq::Load));
        assert_eq!(a.queued_txn(), Some(SnoopTxn::GetS));
        // Nobody else has it: exclusive fill.
        assert_eq!(a.own_grant(SnoopTxn::GetS, false, Some(1)), Completed::Load(1));
        assert_eq!(a.state, Mesi::E);

        // A second core fills the same block: both end shared.
        let mut b: SnoopLine<u8> = SnoopLine::default();
        issued(b.core_req(CoreReq::Load));
        let r = a.snoop_other(SnoopTxn::GetS);
        assert!(r.keeps_copy);
        assert_eq!(a.state, Mesi::S);
        assert_eq!(b.own_grant(SnoopTxn::GetS, true, Some(1)), Completed::Load(1));
        assert_eq!(b.state, Mesi::S);
    }

    #[test]
    fn snoopy_e_upgrades_to_m_silently() {
        let mut a: SnoopLine<u8> = SnoopLine::default();
        a.state = Mesi::E;
        a.data = Some(0);
        match a.core_req(CoreReq::Store) {
            ReqOutcome::Done(_) => {}
            other => panic!("expected silent upgrade, got {}", kind(&other)),
        }
        assert_eq!(a.state, Mesi::M);
    }

    #[test]
    fn snoopy_owner_supplies_on_remote_getm_and_invalidates() {
        let mut owner: SnoopLine<u8> = SnoopLine::default();
        owner.state = Mesi::M;
        owner.data = Some(9);
        let r = owner.snoop_other(SnoopTxn::GetM);
        assert_eq!(r.supplied, Some(9));
        assert!(!r.keeps_copy);
        assert_eq!(owner.state, Mesi::I);
    }

    #[test]
    fn snoopy_upgrade_loser_downgrades_to_full_fill() {
        let mut line: SnoopLine<u8> = SnoopLine::default();
        line.state = Mesi::S;
        line.data = Some(1);
        issued(line.core_req(CoreReq::Store));
        assert_eq!(line.state, Mesi::SmAd);
        // Another core's GetM wins the bus first.
        let r = line.snoop_other(SnoopTxn::GetM);
        assert_eq!(r.supplied, None);
        assert_eq!(line.state, Mesi::ImAd);
        // Our grant still completes the store with a fresh fill.
        assert_eq!(line.own_grant(SnoopTxn::GetM, false, Some(4)), Completed::StorePermission);
        line.write(5);
        assert_eq!(line.state, Mesi::M);
    }

    #[test]
    fn snoopy_eviction_cancelled_when_another_request_arrives_first() {
        let mut line: SnoopLine<u8> = SnoopLine::default();
        line.state = Mesi::M;
        line.data = Some(6);
        issued(line.core_req(CoreReq::Evict));
        assert_eq!(line.queued_txn(), Some(SnoopTxn::PutM));
        let r = line.snoop_other(SnoopTxn::GetS);
        assert_eq!(r.supplied, Some(6));
        assert!(r.cancel_putm);
        assert_eq!(line.state, Mesi::I);
        assert_eq!(line.pending(), None);
    }

    #[test]
    fn protocol_errors_are_reported_not_panicked() {
        let mut line: CacheLine<u8> = CacheLine::default();
        let e = line.msg(usize::MAX, Msg::WBAck).unwrap_err();
        assert_eq!(e.state, "I");
        assert!(e.to_string().contains("WBAck"));
    }
}
