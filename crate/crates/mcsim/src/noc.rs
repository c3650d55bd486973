//! Message-level on-chip network simulation.
//!
//! Five topologies: a shared bus plus line, ring, mesh, and torus fabrics of
//! point-to-point links. Switched topologies use deterministic dimension-order
//! (XY) routing, per-link FIFO queues with bounded depth, backpressure instead
//! of message loss, and round-robin arbitration when several messages compete
//! for one link. The bus serializes everything through a single medium: one
//! transaction is granted per round and every node observes transactions in
//! grant order, which is exactly the property snoopy coherence needs.
//!
//! A message that traverses `h` links of latency `L` with no contention is
//! delivered `h * L` cycles after injection.
//!
//! ```
//! use mcsim::noc::{Dest, Network, Topology};
//!
//! let mut net: Network<&str> = Network::new(Topology::Mesh { w: 2, h: 2 }, 1, 4).unwrap();
//! net.inject(0, Dest::Node(3), "hello").unwrap();
//! let mut got = Vec::new();
//! for _ in 0..4 {
//!     got.extend(net.deliver_cycle());
//! }
//! // Two hops (0 -> 1 -> 3) at link latency 1: delivered after 2 cycles.
//! assert_eq!(got.len(), 1);
//! assert_eq!(got[0].node, 3);
//! assert_eq!(got[0].latency, 2);
//! ```

use std::collections::{BTreeMap, VecDeque};
use thiserror::Error;

pub type NodeId = usize;
pub type MsgId = u64;

#[derive(Debug, Error, PartialEq)]
pub enum NocError {
    #[error("topology has no nodes")]
    EmptyTopology,
    #[error("node {0} out of range (network has {1} nodes)")]
    BadNode(NodeId, usize),
    #[error("link latency must be at least 1")]
    ZeroLatency,
    #[error("queue depth must be at least 1")]
    ZeroQueueDepth,
    #[error("broadcast is only supported on the bus topology")]
    BroadcastUnsupported,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Topology {
    /// Single shared medium; one granted transaction at a time, observed by
    /// every node in grant order.
    Bus { nodes: usize },
    Line { nodes: usize },
    Ring { nodes: usize },
    /// `w` columns by `h` rows; node id = `y * w + x`.
    Mesh { w: usize, h: usize },
    Torus { w: usize, h: usize },
}

impl Topology {
    pub fn nodes(self) -> usize {
        match self {
            Topology::Bus { nodes } | Topology::Line { nodes } | Topology::Ring { nodes } => nodes,
            Topology::Mesh { w, h } | Topology::Torus { w, h } => w * h,
        }
    }
}

/// Where a message goes: one node, or every node (bus only).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dest {
    Node(NodeId),
    Broadcast,
}

/// One message handed to a node this cycle.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Delivery<P> {
    pub id: MsgId,
    pub node: NodeId,
    pub src: NodeId,
    pub payload: P,
    /// Cycles from injection to delivery.
    pub latency: u64,
}

/// Delivery-latency histogram buckets: `<= LAT_EDGES[i]` cycles, with a final
/// catch-all bucket above the last edge.
pub const LAT_EDGES: [u64; 7] = [1, 2, 4, 8, 16, 32, 64];
pub const LAT_BUCKETS: usize = LAT_EDGES.len() + 1;

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct NetStats {
    pub injected: u64,
    pub delivered: u64,
    pub total_latency: u64,
    pub max_latency: u64,
    /// Sum over links (or the bus medium) of cycles spent transmitting.
    pub link_busy_cycles: u64,
    /// Delivered-message latencies bucketed per [`LAT_EDGES`].
    pub latency_hist: [u64; LAT_BUCKETS],
}

impl NetStats {
    pub fn avg_latency(&self) -> f64 {
        if self.delivered == 0 {
            0.0
        } else {
            self.total_latency as f64 / self.delivered as f64
        }
    }
}

/// Shortest-direction step (+1/-1) for one dimension of a ring of size `n`,
/// ties broken toward increasing coordinates.
fn ring_step(from: usize, to: usize, n: usize) -> isize {
    debug_assert_ne!(from, to);
    let fwd = (to + n - from) % n;
    let bwd = n - fwd;
    if fwd <= bwd {
        1
    } else {
        -1
    }
}

/// Deterministic route from `from` to `to` as a node sequence including both
/// endpoints. Mesh and torus resolve the X dimension completely, then Y; ring
/// and torus wrap in whichever direction is shorter.
pub fn route(topo: Topology, from: NodeId, to: NodeId) -> Result<Vec<NodeId>, NocError> {
    let n = topo.nodes();
    if from >= n {
        return Err(NocError::BadNode(from, n));
    }
    if to >= n {
        return Err(NocError::BadNode(to, n));
    }
    let mut path = vec![from];
    let mut cur = from;
    match topo {
        Topology::Bus { .. } => {
            if from != to {
                path.push(to);
            }
        }
        Topology::Line { .. } => {
            while cur != to {
                cur = if to > cur { cur + 1 } else { cur - 1 };
                path.push(cur);
            }
        }
        Topology::Ring { nodes } => {
            while cur != to {
                let s = ring_step(cur, to, nodes);
                cur = (cur as isize + s).rem_euclid(nodes as isize) as usize;
                path.push(cur);
            }
        }
        Topology::Mesh { w, .. } => {
            let (tx, ty) = (to % w, to / w);
            loop {
                let (x, y) = (cur % w, cur / w);
                if x != tx {
                    cur = if tx > x { cur + 1 } else { cur - 1 };
                } else if y != ty {
                    cur = if ty > y { cur + w } else { cur - w };
                } else {
                    break;
                }
                path.push(cur);
            }
        }
        Topology::Torus { w, h } => {
            let (tx, ty) = (to % w, to / w);
            loop {
                let (x, y) = (cur % w, cur / w);
                if x != tx {
                    let nx = (x as isize + ring_step(x, tx, w)).rem_euclid(w as isize) as usize;
                    cur = y * w + nx;
                } else if y != ty {
                    let ny = (y as isize + ring_step(y, ty, h)).rem_euclid(h as isize) as usize;
                    cur = ny * w + x;
                } else {
                    break;
                }
                path.push(cur);
            }
        }
    }
    Ok(path)
}

struct MsgState<P> {
    id: MsgId,
    src: NodeId,
    dest: Dest,
    payload: P,
    injected_at: u64,
    /// Node the message currently sits at.
    pos: NodeId,
    /// Nodes still to visit, in order.
    rest: VecDeque<NodeId>,
}

const INJECT_PORT: usize = usize::MAX;

struct Link {
    from: NodeId,
    to: NodeId,
    queue: VecDeque<usize>,
    /// Slot index on the wire and its completion cycle.
    inflight: Option<(usize, u64)>,
    /// Completed hop that has not yet entered its next queue; keeps the link
    /// occupied (backpressure, never loss).
    parked: Option<usize>,
    rr_next: usize,
    busy_cycles: u64,
}

/// A cycle-driven network instance. `P` is the message payload type.
pub struct Network<P> {
    topo: Topology,
    link_latency: u64,
    queue_depth: usize,
    now: u64,
    next_id: MsgId,
    links: Vec<Link>,
    link_of: BTreeMap<(NodeId, NodeId), usize>,
    /// Incoming link indices per node, ascending, for round-robin sources.
    in_links: Vec<Vec<usize>>,
    inject_q: Vec<VecDeque<usize>>,
    /// Self-addressed messages (src == dst); delivered next cycle.
    local_q: VecDeque<usize>,
    slots: Vec<Option<MsgState<P>>>,
    free_slots: Vec<usize>,
    bus_inflight: Option<(usize, u64)>,
    bus_rr: usize,
    stats: NetStats,
}

impl<P: Clone> Network<P> {
    pub fn new(topo: Topology, link_latency: u64, queue_depth: usize) -> Result<Self, NocError> {
        let n = topo.nodes();
        if n == 0 {
            return Err(NocError::EmptyTopology);
        }
        if link_latency == 0 {
            return Err(NocError::ZeroLatency);
        }
        if queue_depth == 0 {
            return Err(NocError::ZeroQueueDepth);
        }
        let mut pairs: Vec<(NodeId, NodeId)> = Vec::new();
        let mut add = |a: NodeId, b: NodeId| {
            if a != b {
                pairs.push((a, b));
                pairs.push((b, a));
            }
        };
        match topo {
            Topology::Bus { .. } => {}
            Topology::Line { nodes } => {
                for i in 1..nodes {
                    add(i - 1, i);
                }
            }
            Topology::Ring { nodes } => {
                for i in 1..nodes {
                    add(i - 1, i);
                }
                if nodes > 1 {
                    add(nodes - 1, 0);
                }
            }
            Topology::Mesh { w, h } | Topology::Torus { w, h } => {
                for y in 0..h {
                    for x in 0..w {
                        if x + 1 < w {
                            add(y * w + x, y * w + x + 1);
                        }
                        if y + 1 < h {
                            add(y * w + x, (y + 1) * w + x);
                        }
                    }
                }
                if matches!(topo, Topology::Torus { .. }) {
                    for y in 0..h {
                        add(y * w + w - 1, y * w);
                    }
                    for x in 0..w {
                        add((h - 1) * w + x, x);
                    }
                }
            }
        }
        pairs.sort_unstable();
        pairs.dedup();
        let mut link_of = BTreeMap::new();
        let mut links = Vec::with_capacity(pairs.len());
        let mut in_links = vec![Vec::new(); n];
        for (i, &(a, b)) in pairs.iter().enumerate() {
            link_of.insert((a, b), i);
            links.push(Link {
                from: a,
                to: b,
                queue: VecDeque::new(),
                inflight: None,
                parked: None,
                rr_next: 0,
                busy_cycles: 0,
            });
            in_links[b].push(i);
        }
        Ok(Network {
            topo,
            link_latency,
            queue_depth,
            now: 0,
            next_id: 0,
            links,
            link_of,
            in_links,
            inject_q: vec![VecDeque::new(); n],
            slots: Vec::new(),
            free_slots: Vec::new(),
            local_q: VecDeque::new(),
            bus_inflight: None,
            bus_rr: 0,
            stats: NetStats::default(),
        })
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn stats(&self) -> NetStats {
        self.stats
    }

    pub fn topology(&self) -> Topology {
        self.topo
    }

    /// True when no message is queued or in flight anywhere.
    pub fn idle(&self) -> bool {
        self.slots.iter().all(|s| s.is_none())
    }

    pub fn inject(&mut self, src: NodeId, dest: Dest, payload: P) -> Result<MsgId, NocError> {
        let n = self.topo.nodes();
        if src >= n {
            return Err(NocError::BadNode(src, n));
        }
        let rest: VecDeque<NodeId> = match dest {
            Dest::Broadcast => {
                if !matches!(self.topo, Topology::Bus { .. }) {
                    return Err(NocError::BroadcastUnsupported);
                }
                VecDeque::new()
            }
            Dest::Node(d) => route(self.topo, src, d)?.into_iter().skip(1).collect(),
        };
        let id = self.next_id;
        self.next_id += 1;
        let msg = MsgState { id, src, dest, payload, injected_at: self.now, pos: src, rest };
        let slot = if let Some(s) = self.free_slots.pop() {
            s
        } else {
            self.slots.push(None);
            self.slots.len() - 1
        };
        self.slots[slot] = Some(msg);
        let local = !matches!(self.topo, Topology::Bus { .. })
            && self.slots[slot].as_ref().is_some_and(|m| m.rest.is_empty());
        if local {
            self.local_q.push_back(slot);
        } else {
            self.inject_q[src].push_back(slot);
        }
        self.stats.injected += 1;
        Ok(id)
    }

    /// Link a message at `slot` wants next, or `None` if it has arrived.
    fn next_link_of(&self, slot: usize) -> Option<usize> {
        let m = self.slots[slot].as_ref().expect("live message");
        let next = *m.rest.front()?;
        Some(self.link_of[&(m.pos, next)])
    }

    fn retire(&mut self, slot: usize) -> (MsgState<P>, u64) {
        let m = self.slots[slot].take().expect("live message");
        self.free_slots.push(slot);
        let latency = self.now - m.injected_at;
        self.stats.delivered += 1;
        self.stats.total_latency += latency;
        self.stats.max_latency = self.stats.max_latency.max(latency);
        let bucket =
            LAT_EDGES.iter().position(|&e| latency <= e).unwrap_or(LAT_EDGES.len());
        self.stats.latency_hist[bucket] += 1;
        (m, latency)
    }

    fn deliver_to(&mut self, slot: usize, node: NodeId, out: &mut Vec<Delivery<P>>) {
        let (m, latency) = self.retire(slot);
        out.push(Delivery { id: m.id, node, src: m.src, payload: m.payload, latency });
    }

    /// Advance one cycle and return every message delivered during it.
    pub fn deliver_cycle(&mut self) -> Vec<Delivery<P>> {
        self.now += 1;
        let mut out = Vec::new();
        if matches!(self.topo, Topology::Bus { .. }) {
            self.bus_cycle(&mut out);
            return out;
        }

        // Self-addressed messages skip the fabric: one cycle, zero hops.
        while let Some(slot) = self.local_q.pop_front() {
            let at = self.slots[slot].as_ref().expect("live message").pos;
            self.deliver_to(slot, at, &mut out);
        }

        // 1. Queue entry: hops parked at this node and fresh injections
        //    compete for each link's queue, round-robin over input sources
        //    (incoming links ascending, then the injection port).
        for li in 0..self.links.len() {
            let from = self.links[li].from;
            let mut sources = self.in_links[from].clone();
            sources.push(INJECT_PORT);
            let start = self.links[li].rr_next % sources.len();
            for k in 0..sources.len() {
                if self.links[li].queue.len() >= self.queue_depth {
                    break;
                }
                let s = sources[(start + k) % sources.len()];
                let candidate = if s == INJECT_PORT {
                    self.inject_q[from]
                        .front()
                        .copied()
                        .filter(|&slot| self.next_link_of(slot) == Some(li))
                } else {
                    self.links[s].parked.filter(|&slot| self.next_link_of(slot) == Some(li))
                };
                if let Some(slot) = candidate {
                    if s == INJECT_PORT {
                        self.inject_q[from].pop_front();
                    } else {
                        self.links[s].parked = None;
                    }
                    self.links[li].queue.push_back(slot);
                    self.links[li].rr_next = (start + k) % sources.len() + 1;
                }
            }
        }

        // 2. Free links begin transmitting their queue heads.
        for li in 0..self.links.len() {
            let link = &mut self.links[li];
            if link.inflight.is_none() && link.parked.is_none() {
                if let Some(slot) = link.queue.pop_front() {
                    link.inflight = Some((slot, self.now + self.link_latency - 1));
                }
            }
        }

        // 3. Hop completion: the message moves to the link's endpoint; final
        //    hops deliver, others park awaiting next cycle's queue entry.
        for li in 0..self.links.len() {
            if self.links[li].inflight.is_some() {
                self.links[li].busy_cycles += 1;
                self.stats.link_busy_cycles += 1;
            }
            if let Some((slot, done)) = self.links[li].inflight {
                if done == self.now {
                    self.links[li].inflight = None;
                    let at = self.links[li].to;
                    {
                        let m = self.slots[slot].as_mut().expect("live message");
                        let hop = m.rest.pop_front();
                        debug_assert_eq!(hop, Some(at));
                        m.pos = at;
                    }
                    let arrived = self.slots[slot]
                        .as_ref()
                        .map(|m| m.rest.is_empty())
                        .unwrap_or(false);
                    if arrived {
                        self.deliver_to(slot, at, &mut out);
                    } else {
                        self.links[li].parked = Some(slot);
                    }
                }
            }
        }
        out
    }

    fn finish_bus(&mut self, slot: usize, out: &mut Vec<Delivery<P>>) {
        match self.slots[slot].as_ref().map(|m| m.dest).expect("live message") {
            Dest::Broadcast => {
                let (m, latency) = self.retire(slot);
                for node in 0..self.topo.nodes() {
                    out.push(Delivery {
                        id: m.id,
                        node,
                        src: m.src,
                        payload: m.payload.clone(),
                        latency,
                    });
                }
            }
            Dest::Node(d) => self.deliver_to(slot, d, out),
        }
    }

    fn bus_cycle(&mut self, out: &mut Vec<Delivery<P>>) {
        let mut completed = false;
        if let Some((slot, done)) = self.bus_inflight {
            self.stats.link_busy_cycles += 1;
            if done == self.now {
                self.bus_inflight = None;
                self.finish_bus(slot, out);
                completed = true;
            }
        }
        // The medium is busy through the cycle a transaction completes; the
        // next grant starts the following cycle.
        if self.bus_inflight.is_none() && !completed {
            let n = self.topo.nodes();
            for k in 0..n {
                let node = (self.bus_rr + k) % n;
                if let Some(slot) = self.inject_q[node].pop_front() {
                    self.bus_rr = node + 1;
                    let done = self.now + self.link_latency - 1;
                    if done == self.now {
                        self.stats.link_busy_cycles += 1;
                        self.finish_bus(slot, out);
                    } else {
                        self.bus_inflight = Some((slot, done));
                    }
                    break;
                }
            }
        }
    }
}
