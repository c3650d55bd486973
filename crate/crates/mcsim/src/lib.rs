//! Cycle-approximate simulation of a multicore microprocessor, plus the
//! closed-form calculators that motivate its design space.
//!
//! The crate is organised around a small RISC instruction set ([`isa`]) with a
//! one-instruction-at-a-time golden model that serves as the correctness
//! oracle for everything else:
//!
//! * [`laws`] - technology and architecture scaling calculators (classical
//!   dimension scaling, square-root area/performance, parallel speedup bounds,
//!   compound growth, bypass-network cost).
//! * [`bpred`] - dynamic branch predictors (bimodal, two-level adaptive,
//!   hybrid with a chooser), a branch target buffer, and fetch-group
//!   prediction rules for superscalar front ends.
//! * [`cpu`] - an out-of-order superscalar core: rename, issue queue with
//!   wake-up/select, reorder buffer, load/store queue with forwarding and
//!   memory-dependence speculation, and squash recovery.
//! * [`memhier`] - a coherent cache hierarchy with both snoopy and
//!   directory-based MESI protocols, a trace-driven mode, and an exhaustive
//!   protocol explorer.
//! * [`noc`] - message-level on-chip networks (bus, line, ring, mesh, torus)
//!   with dimension-order routing and round-robin link arbitration.
//! * [`consistency`] - memory consistency: per-core FIFO store buffers,
//!   sequential consistency and total store order, and exhaustive litmus-test
//!   outcome enumerators.
//! * [`harness`] - experiment configuration, the multicore driver loop,
//!   statistics reporting, and seeded deterministic randomness.
//!
//! Everything is deterministic: a given configuration and seed reproduce the
//! same cycle counts, the same committed instruction stream, and byte-identical
//! reports.
//!
//! # A first taste
//!
//! Scaling calculators are plain functions:
//!
//! ```
//! use mcsim::laws;
//!
//! // One generation of ideal dimension scaling: transistors get 30% smaller,
//! // density roughly doubles, and gates are ~43% faster.
//! let g = laws::dennard_scale(1);
//! assert!((g.density - 2.04).abs() < 0.01);
//! assert!((g.speed_gain - 0.43).abs() < 0.005);
//! ```
//!
//! Programs are assembled from text and run on the golden model:
//!
//! ```
//! use mcsim::isa;
//!
//! let src = "
//!     addi r1, r0, 10        # n = 10
//!     addi r2, r0, 0         # sum = 0
//! loop:
//!     add  r2, r2, r1
//!     addi r1, r1, -1
//!     bne  r1, r0, loop
//!     halt
//! ";
//! let prog = isa::assemble(src).unwrap();
//! let run = isa::functional_run(&prog, 10_000).unwrap();
//! assert_eq!(run.state.threads[0].regs[2], 55); // 10+9+...+1
//! ```

pub mod bpred;
pub mod consistency;
pub mod cpu;
pub mod harness;
pub mod isa;
pub mod laws;
pub mod memhier;
pub mod noc;

/// The guide from `book/`, included chapter by chapter so that every code
/// block in it compiles and runs as a doc-test: the book cannot drift from
/// the library. Build the rendered version with `mdbook build book`.
pub mod guide {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/scaling-laws.md")]
    pub mod scaling_laws {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    pub mod pipeline {}
    #[doc = include_str!("../../../book/src/branch-prediction.md")]
    pub mod branch_prediction {}
    #[doc = include_str!("../../../book/src/memory-hierarchy.md")]
    pub mod memory_hierarchy {}
    #[doc = include_str!("../../../book/src/coherence-checking.md")]
    pub mod coherence_checking {}
    #[doc = include_str!("../../../book/src/consistency.md")]
    pub mod consistency {}
    #[doc = include_str!("../../../book/src/interconnect.md")]
    pub mod interconnect {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    pub mod experiments {}
}
