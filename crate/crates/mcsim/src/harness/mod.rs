//! Experiment orchestration: configuration files, the drivers that turn a
//! configuration into runs, statistics reports with stable formatting, and
//! the seeded randomness every experiment shares.
//!
//! Configurations are flat `key = value` text with `[section]` headers:
//!
//! ```text
//! mode   = run            # run | litmus | bpred | laws | check-protocol
//! program = loop.asm
//! seed   = 42
//!
//! [core]
//! width     = 4
//! model     = tso         # sc | tso
//! predictor = two_level
//! history_bits = 4
//!
//! [mem]
//! coherence = directory   # snoopy | directory | perfect | disabled
//! llc_lat   = 10
//!
//! [noc]
//! topology  = mesh
//! dims      = 2x2
//! ```
//!
//! Unknown keys are rejected with their line number, so a typo cannot
//! silently fall back to a default:
//!
//! ```
//! use mcsim::harness::{parse_config, HarnessError};
//!
//! let cfg = parse_config("mode = run").unwrap();
//! assert_eq!(cfg.cpu.width, 4);            // documented defaults:
//! assert_eq!(cfg.mem.mode.to_string(), "snoopy");
//! assert_eq!(cfg.cpu.model.to_string(), "tso");
//!
//! let err = parse_config("mode = run\nwdith = 4").unwrap_err();
//! assert!(matches!(err, HarnessError::UnknownKey { line: 2, .. }));
//! ```
//!
//! Reports carry a scalar block plus a row grid and render as `key=value`
//! lines, CSV, or an aligned table. A configuration and a seed determine
//! every output byte:
//!
//! ```
//! use mcsim::harness::{parse_config, run_experiment, report_stats, OutFormat};
//!
//! let cfg = parse_config("mode = laws").unwrap();
//! let a = report_stats(&run_experiment(&cfg).unwrap(), OutFormat::Kv);
//! let b = report_stats(&run_experiment(&cfg).unwrap(), OutFormat::Kv);
//! assert_eq!(a, b);
//! assert!(a.contains("dennard.g1.density=2.0408"));
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::bpred::{evaluate_trace, parse_trace, BpredError, PredictorConfig};
use crate::consistency::{
    check_expectation, enumerate_outcomes, parse_litmus, ExpectCond, LitmusError, LitmusOp,
    LitmusTest, Model, Outcome,
};
use crate::cpu::{CpuConfig, SimError, System, SystemRun};
use crate::isa::{assemble, functional_run, AsmError, Program, Word};
use crate::laws;
use crate::memhier::check::{check, CheckConfig, Variant};
use crate::memhier::{run_mem_trace, MemConfig, MemError, MemMode, TraceOp};
use crate::noc::{Topology, LAT_EDGES};

// ---------------------------------------------------------------------------
// Seeded randomness

fn fnv1a(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h
}

/// The generator for one component of an experiment. Streams are split by
/// label, so a new consumer of randomness never perturbs existing ones.
///
/// ```
/// use rand::RngCore;
/// let mut a = mcsim::harness::rng_for(7, "workload");
/// let mut b = mcsim::harness::rng_for(7, "workload");
/// assert_eq!(a.next_u64(), b.next_u64());
/// ```
pub fn rng_for(seed: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ fnv1a(label))
}

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Run,
    Litmus,
    Bpred,
    Laws,
    CheckProtocol,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Mode::Run => "run",
            Mode::Litmus => "litmus",
            Mode::Bpred => "bpred",
            Mode::Laws => "laws",
            Mode::CheckProtocol => "check-protocol",
        };
        write!(f, "{s}")
    }
}

impl FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "run" => Ok(Mode::Run),
            "litmus" => Ok(Mode::Litmus),
            "bpred" => Ok(Mode::Bpred),
            "laws" => Ok(Mode::Laws),
            "check-protocol" => Ok(Mode::CheckProtocol),
            other => Err(format!("unknown mode `{other}` (run|litmus|bpred|laws|check-protocol)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutFormat {
    Kv,
    Csv,
    Table,
}

impl FromStr for OutFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "kv" => Ok(OutFormat::Kv),
            "csv" => Ok(OutFormat::Csv),
            "table" => Ok(OutFormat::Table),
            other => Err(format!("unknown output format `{other}` (kv|csv|table)")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub mode: Mode,
    /// Core count for drivers that create their own workload (protocol
    /// checks, replicated single-thread programs). 0 derives it from the
    /// program's thread count.
    pub cores: usize,
    pub cpu: CpuConfig,
    pub mem: MemConfig,
    pub program: Option<PathBuf>,
    pub trace: Option<PathBuf>,
    /// A litmus file, or a directory of `.lit` files.
    pub litmus: Option<PathBuf>,
    pub seed: u64,
    /// Cycle budget per run.
    pub budget: u64,
    /// Compare the final architectural state of single-thread runs against
    /// the functional golden model.
    pub verify: bool,
    /// Lift the realism guard on superscalar width.
    pub allow_unrealistic: bool,
    /// A `dims` key fixed the topology shape; otherwise the shape is fitted
    /// to the core count when the run starts.
    pub dims_given: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            mode: Mode::Run,
            cores: 0,
            cpu: CpuConfig::default(),
            mem: MemConfig::default(),
            program: None,
            trace: None,
            litmus: None,
            seed: 0,
            budget: 10_000_000,
            verify: true,
            allow_unrealistic: false,
            dims_given: false,
        }
    }
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{path}: {msg}")]
    Io { path: String, msg: String },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: unknown key `{key}` in [{section}]")]
    UnknownKey { line: usize, key: String, section: String },
    #[error("config violates the rule: {rule}")]
    Constraint { rule: String },
    #[error("referenced file does not exist: {path}")]
    MissingFile { path: String },
    #[error("mode `{mode}` needs a `{what}` path in the config")]
    MissingInput { mode: Mode, what: &'static str },
    #[error(transparent)]
    Asm(#[from] AsmError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Mem(#[from] MemError),
    #[error(transparent)]
    Litmus(#[from] LitmusError),
    #[error(transparent)]
    Bpred(#[from] BpredError),
    #[error("verification failed: {0}")]
    Verify(String),
}

impl ExperimentConfig {
    /// Realism and structural checks beyond what each module enforces.
    pub fn validate(&self) -> Result<(), HarnessError> {
        if !self.allow_unrealistic && !(2..=8).contains(&self.cpu.width) {
            return Err(HarnessError::Constraint {
                rule: format!(
                    "superscalar width between 2 and 8 (got {}); \
                     set allow_unrealistic = true to override",
                    self.cpu.width
                ),
            });
        }
        self.cpu.validate()?;
        Ok(())
    }
}

fn num<T: FromStr>(line: usize, key: &str, v: &str) -> Result<T, HarnessError> {
    v.parse().map_err(|_| HarnessError::Parse {
        line,
        msg: format!("bad value `{v}` for {key}"),
    })
}

fn boolean(line: usize, key: &str, v: &str) -> Result<bool, HarnessError> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(HarnessError::Parse { line, msg: format!("{key} wants true|false, got `{v}`") }),
    }
}

fn parse_dims(line: usize, v: &str) -> Result<(usize, usize), HarnessError> {
    let bad = || HarnessError::Parse { line, msg: format!("dims wants `WxH` or `N`, got `{v}`") };
    if let Some((a, b)) = v.split_once('x') {
        Ok((a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?))
    } else {
        Ok((v.parse().map_err(|_| bad())?, 1))
    }
}

/// Parse a topology name with optional inline shape: `mesh`, `mesh2x4`,
/// `ring6`, `bus`. Returns the topology and whether a shape was given.
pub fn parse_topology(s: &str) -> Result<(Topology, bool), String> {
    let cut = s.find(|c: char| !c.is_ascii_alphabetic()).unwrap_or(s.len());
    let (name, rest) = s.split_at(cut);
    let dims = if rest.is_empty() {
        None
    } else if let Some((a, b)) = rest.split_once('x') {
        Some((
            a.parse().map_err(|_| format!("bad dims in `{s}`"))?,
            b.parse().map_err(|_| format!("bad dims in `{s}`"))?,
        ))
    } else {
        Some((rest.parse().map_err(|_| format!("bad dims in `{s}`"))?, 1))
    };
    let t = shape(name, dims).ok_or(format!("unknown topology `{name}` (bus|line|ring|mesh|torus)"))?;
    Ok((t, dims.is_some()))
}

fn shape(kind: &str, dims: Option<(usize, usize)>) -> Option<Topology> {
    let (w, h) = dims.unwrap_or(match kind {
        "mesh" | "torus" => (2, 2),
        _ => (4, 1),
    });
    Some(match kind {
        "bus" => Topology::Bus { nodes: w * h },
        "line" => Topology::Line { nodes: w * h },
        "ring" => Topology::Ring { nodes: w * h },
        "mesh" => Topology::Mesh { w, h },
        "torus" => Topology::Torus { w, h },
        _ => return None,
    })
}

fn kind_name(t: &Topology) -> &'static str {
    match t {
        Topology::Bus { .. } => "bus",
        Topology::Line { .. } => "line",
        Topology::Ring { .. } => "ring",
        Topology::Mesh { .. } => "mesh",
        Topology::Torus { .. } => "torus",
    }
}

/// Human-readable topology name with its shape, e.g. `mesh2x4`, `ring6`.
pub fn topology_label(t: &Topology) -> String {
    match *t {
        Topology::Bus { nodes } => format!("bus{nodes}"),
        Topology::Line { nodes } => format!("line{nodes}"),
        Topology::Ring { nodes } => format!("ring{nodes}"),
        Topology::Mesh { w, h } => format!("mesh{w}x{h}"),
        Topology::Torus { w, h } => format!("torus{w}x{h}"),
    }
}

/// Keep the topology kind but refit its shape to `cores` nodes: rings and
/// buses get exactly `cores` stops, grids the most square factorization.
pub fn fit_topology(kind: &Topology, cores: usize) -> Topology {
    let n = cores.max(1);
    match kind {
        Topology::Bus { .. } => Topology::Bus { nodes: n },
        Topology::Line { .. } => Topology::Line { nodes: n },
        Topology::Ring { .. } => Topology::Ring { nodes: n },
        Topology::Mesh { .. } => {
            let (w, h) = grid(n);
            Topology::Mesh { w, h }
        }
        Topology::Torus { .. } => {
            let (w, h) = grid(n);
            Topology::Torus { w, h }
        }
    }
}

fn grid(n: usize) -> (usize, usize) {
    let mut w = (n as f64).sqrt().floor() as usize;
    while w > 1 && n % w != 0 {
        w -= 1;
    }
    let w = w.max(1);
    (w, n / w)
}

/// Parse configuration text. Defaults are the documented ones (width 4,
/// snoopy MESI, 2x2 mesh, TSO); unknown keys and malformed values fail with
/// their line number; the result is validated.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, HarnessError> {
    let mut c = ExperimentConfig::default();
    let mut section = String::from("run");
    // Predictor pieces are assembled once the whole file is read, so key
    // order does not matter.
    let mut pred_kind: Option<String> = None;
    let mut pred_seen = false;
    let (mut index_bits, mut history_bits, mut bimodal_bits, mut chooser_bits) =
        (12u32, 8u32, 12u32, 12u32);
    let mut topo_kind: Option<String> = None;
    let mut topo_inline_dims = false;
    let mut dims: Option<(usize, usize)> = None;

    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let t = raw.split('#').next().unwrap_or("").trim();
        if t.is_empty() {
            continue;
        }
        if let Some(rest) = t.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or(HarnessError::Parse { line, msg: "unclosed [section]".into() })?
                .trim();
            match name {
                "run" | "core" | "mem" | "noc" => section = name.to_string(),
                other => {
                    return Err(HarnessError::Parse {
                        line,
                        msg: format!("unknown section [{other}] (run|core|mem|noc)"),
                    })
                }
            }
            continue;
        }
        let (k, v) = t.split_once('=').ok_or(HarnessError::Parse {
            line,
            msg: format!("expected `key = value`, got `{t}`"),
        })?;
        let (k, v) = (k.trim(), v.trim());
        if v.is_empty() {
            return Err(HarnessError::Parse { line, msg: format!("empty value for {k}") });
        }
        let unknown = || HarnessError::UnknownKey {
            line,
            key: k.to_string(),
            section: section.clone(),
        };
        match (section.as_str(), k) {
            ("run", "mode") => {
                c.mode = v.parse().map_err(|msg| HarnessError::Parse { line, msg })?
            }
            ("run", "seed") => c.seed = num(line, k, v)?,
            ("run", "budget") => c.budget = num(line, k, v)?,
            ("run", "cores") => c.cores = num(line, k, v)?,
            ("run", "program") => c.program = Some(PathBuf::from(v)),
            ("run", "trace") => c.trace = Some(PathBuf::from(v)),
            ("run", "litmus") => c.litmus = Some(PathBuf::from(v)),
            ("run", "verify") => c.verify = boolean(line, k, v)?,
            ("run", "allow_unrealistic") => c.allow_unrealistic = boolean(line, k, v)?,

            ("core", "width") => c.cpu.width = num(line, k, v)?,
            ("core", "fd_stages") => c.cpu.fd_stages = num(line, k, v)?,
            ("core", "rob_size") => c.cpu.rob_size = num(line, k, v)?,
            ("core", "iq_size") => c.cpu.iq_size = num(line, k, v)?,
            ("core", "lsq_size") => c.cpu.lsq_size = num(line, k, v)?,
            ("core", "sb_capacity") => c.cpu.sb_capacity = num(line, k, v)?,
            ("core", "ooo") => c.cpu.ooo = boolean(line, k, v)?,
            ("core", "model") => {
                c.cpu.model = match v {
                    "sc" => Model::Sc,
                    "tso" => Model::Tso,
                    _ => {
                        return Err(HarnessError::Parse {
                            line,
                            msg: format!("model wants sc|tso, got `{v}`"),
                        })
                    }
                }
            }
            ("core", "predictor") => {
                match v {
                    "not_taken" | "bimodal" | "two_level" | "hybrid" => {}
                    _ => {
                        return Err(HarnessError::Parse {
                            line,
                            msg: format!(
                                "predictor wants not_taken|bimodal|two_level|hybrid, got `{v}`"
                            ),
                        })
                    }
                }
                pred_kind = Some(v.to_string());
                pred_seen = true;
            }
            ("core", "index_bits") => {
                index_bits = num(line, k, v)?;
                pred_seen = true;
            }
            ("core", "history_bits") => {
                history_bits = num(line, k, v)?;
                pred_seen = true;
            }
            ("core", "bimodal_bits") => {
                bimodal_bits = num(line, k, v)?;
                pred_seen = true;
            }
            ("core", "chooser_bits") => {
                chooser_bits = num(line, k, v)?;
                pred_seen = true;
            }
            ("core", "btb_sets") => c.cpu.btb_sets = num(line, k, v)?,
            ("core", "lat_int") => c.cpu.lat_int = num(line, k, v)?,
            ("core", "lat_mul") => c.cpu.lat_mul = num(line, k, v)?,
            ("core", "fu_int") => c.cpu.fu_int = num(line, k, v)?,
            ("core", "fu_mul") => c.cpu.fu_mul = num(line, k, v)?,
            ("core", "fu_mem") => c.cpu.fu_mem = num(line, k, v)?,
            ("core", "mem_dep_pred") => c.cpu.mem_dep_pred = boolean(line, k, v)?,

            ("mem", "coherence") => {
                c.mem.mode = match v {
                    "snoopy" => MemMode::Snoopy,
                    "directory" => MemMode::Directory,
                    "perfect" => MemMode::Perfect,
                    "disabled" => MemMode::Disabled,
                    _ => {
                        return Err(HarnessError::Parse {
                            line,
                            msg: format!(
                                "coherence wants snoopy|directory|perfect|disabled, got `{v}`"
                            ),
                        })
                    }
                }
            }
            ("mem", "block_words") => c.mem.block_words = num(line, k, v)?,
            ("mem", "l1_sets") => c.mem.l1_sets = num(line, k, v)?,
            ("mem", "l1_ways") => c.mem.l1_ways = num(line, k, v)?,
            ("mem", "l1i_sets") => c.mem.l1i_sets = num(line, k, v)?,
            ("mem", "l1i_ways") => c.mem.l1i_ways = num(line, k, v)?,
            ("mem", "llc_sets") => c.mem.llc_sets = num(line, k, v)?,
            ("mem", "llc_ways") => c.mem.llc_ways = num(line, k, v)?,
            ("mem", "l1_lat") => c.mem.l1_lat = num(line, k, v)?,
            ("mem", "llc_lat") => c.mem.llc_lat = num(line, k, v)?,
            ("mem", "mem_lat") => c.mem.mem_lat = num(line, k, v)?,
            ("mem", "bus_lat") => c.mem.bus_lat = num(line, k, v)?,

            ("noc", "topology") => {
                let (t, inline) =
                    parse_topology(v).map_err(|msg| HarnessError::Parse { line, msg })?;
                topo_kind = Some(kind_name(&t).to_string());
                if inline {
                    topo_inline_dims = true;
                    c.mem.topology = t;
                }
            }
            ("noc", "dims") => dims = Some(parse_dims(line, v)?),
            ("noc", "link_latency") => c.mem.link_lat = num(line, k, v)?,
            ("noc", "queue_depth") => c.mem.queue_depth = num(line, k, v)?,

            _ => return Err(unknown()),
        }
    }

    if pred_seen {
        let kind = pred_kind.as_deref().unwrap_or("bimodal");
        c.cpu.bpred = match kind {
            "not_taken" => PredictorConfig::AlwaysNotTaken,
            "bimodal" => PredictorConfig::Bimodal { index_bits },
            "two_level" => PredictorConfig::TwoLevel { history_bits, index_bits },
            "hybrid" => PredictorConfig::Hybrid {
                bimodal_bits,
                history_bits,
                index_bits,
                chooser_bits,
            },
            _ => unreachable!("validated above"),
        };
    }
    if let Some((w, h)) = dims {
        let kind = topo_kind.as_deref().unwrap_or(kind_name(&c.mem.topology));
        c.mem.topology = shape(kind, Some((w, h))).expect("kind validated");
        c.dims_given = true;
    } else if topo_kind.is_some() {
        c.dims_given = topo_inline_dims;
        if !topo_inline_dims {
            let kind = topo_kind.as_deref().unwrap();
            c.mem.topology = shape(kind, None).expect("kind validated");
        }
    }
    c.validate()?;
    Ok(c)
}

/// Read and parse a config file. Relative `program`/`trace`/`litmus` paths
/// resolve against the config file's directory and must exist.
pub fn load_config(path: &Path) -> Result<ExperimentConfig, HarnessError> {
    let text = fs::read_to_string(path).map_err(|e| HarnessError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    let mut cfg = parse_config(&text)?;
    let base = path.parent().unwrap_or(Path::new("."));
    for p in [&mut cfg.program, &mut cfg.trace, &mut cfg.litmus].into_iter().flatten() {
        if p.is_relative() {
            *p = base.join(&p);
        }
        if !p.exists() {
            return Err(HarnessError::MissingFile { path: p.display().to_string() });
        }
    }
    Ok(cfg)
}

// ---------------------------------------------------------------------------
// Reports

/// A statistics report: run-level scalars plus a row grid. The first column
/// of the grid is the row label. Rendering is byte-stable: fixed float
/// precision, fixed key order.
#[derive(Debug, Clone, PartialEq)]
pub struct StatsReport {
    pub mode: Mode,
    /// Every verdict in the report holds (expectations met, checks passed).
    pub ok: bool,
    pub scalars: Vec<(String, String)>,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

fn fmt_f(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.4}")
    } else {
        "0.0000".to_string()
    }
}

fn csv_cell(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Render a report. `kv` emits `key=value` lines (rows become
/// `<label>.<column>=<value>`), `csv` the grid with a header row, `table`
/// an aligned human-readable layout.
pub fn report_stats(r: &StatsReport, format: OutFormat) -> String {
    match format {
        OutFormat::Kv => {
            let mut out = format!("mode={}\nok={}\n", r.mode, r.ok);
            for (k, v) in &r.scalars {
                out.push_str(&format!("{k}={v}\n"));
            }
            for row in &r.rows {
                if r.columns.len() == 2 {
                    out.push_str(&format!("{}={}\n", row[0], row[1]));
                } else {
                    for (c, v) in r.columns.iter().zip(row).skip(1) {
                        out.push_str(&format!("{}.{c}={v}\n", row[0]));
                    }
                }
            }
            out
        }
        OutFormat::Csv => {
            let mut out = r.columns.iter().map(|c| csv_cell(c)).collect::<Vec<_>>().join(",");
            out.push('\n');
            for row in &r.rows {
                out.push_str(&row.iter().map(|v| csv_cell(v)).collect::<Vec<_>>().join(","));
                out.push('\n');
            }
            out
        }
        OutFormat::Table => {
            let mut out = String::new();
            let key_w = r.scalars.iter().map(|(k, _)| k.len()).max().unwrap_or(0).max(4);
            out.push_str(&format!("{:key_w$}  {}\n", "mode", r.mode));
            out.push_str(&format!("{:key_w$}  {}\n", "ok", r.ok));
            for (k, v) in &r.scalars {
                out.push_str(&format!("{k:key_w$}  {v}\n"));
            }
            if r.columns.is_empty() {
                return out;
            }
            let mut w: Vec<usize> = r.columns.iter().map(|c| c.len()).collect();
            for row in &r.rows {
                for (i, v) in row.iter().enumerate() {
                    w[i] = w[i].max(v.len());
                }
            }
            out.push('\n');
            let line = |cells: &[String]| {
                cells
                    .iter()
                    .enumerate()
                    .map(|(i, v)| format!("{v:w$}", w = w[i]))
                    .collect::<Vec<_>>()
                    .join("  ")
                    .trim_end()
                    .to_string()
            };
            out.push_str(&line(&r.columns));
            out.push('\n');
            out.push_str(&w.iter().map(|n| "-".repeat(*n)).collect::<Vec<_>>().join("  "));
            out.push('\n');
            for row in &r.rows {
                out.push_str(&line(row));
                out.push('\n');
            }
            out
        }
    }
}

// ---------------------------------------------------------------------------
// Experiment dispatch

/// Run the experiment a config describes and collect its report. The
/// dispatch per mode: `run` drives the cycle-level system (or replays a
/// memory trace when only `trace` is given), `litmus` checks expectation
/// lines against the exhaustive enumerators, `bpred` scores a predictor on
/// a branch trace, `laws` tabulates the closed-form calculators, and
/// `check-protocol` model-checks both coherence protocols.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<StatsReport, HarnessError> {
    cfg.validate()?;
    match cfg.mode {
        Mode::Run => {
            if let Some(path) = &cfg.program {
                let src = read(path)?;
                let prog = assemble(&src)?;
                run_program(cfg, &prog)
            } else if let Some(path) = &cfg.trace {
                let src = read(path)?;
                let ops = crate::memhier::parse_mem_trace(&src)?;
                trace_report(cfg, &ops)
            } else {
                Err(HarnessError::MissingInput { mode: cfg.mode, what: "program" })
            }
        }
        Mode::Litmus => {
            let path =
                cfg.litmus.as_ref().ok_or(HarnessError::MissingInput { mode: cfg.mode, what: "litmus" })?;
            Ok(litmus_report(&load_litmus_corpus(path)?))
        }
        Mode::Bpred => {
            let path =
                cfg.trace.as_ref().ok_or(HarnessError::MissingInput { mode: cfg.mode, what: "trace" })?;
            let trace = parse_trace(&read(path)?)?;
            bpred_report(cfg, &trace)
        }
        Mode::Laws => Ok(laws_report()),
        Mode::CheckProtocol => Ok(check_report(if cfg.cores == 0 { 2 } else { cfg.cores })),
    }
}

fn read(path: &Path) -> Result<String, HarnessError> {
    fs::read_to_string(path)
        .map_err(|e| HarnessError::Io { path: path.display().to_string(), msg: e.to_string() })
}

/// Effective memory config for `cores` cores: unless the config pinned a
/// shape, the topology is refitted so every core has a node (minimum two,
/// so a lone core still has a fabric to sit on).
fn mem_for(cfg: &ExperimentConfig, cores: usize) -> MemConfig {
    let mut m = cfg.mem.clone();
    if !cfg.dims_given {
        m.topology = fit_topology(&m.topology, cores.max(2));
    }
    m
}

// ---------------------------------------------------------------------------
// mode = run

/// Drive an assembled program on the cycle-level system and report. A
/// single-thread program with `cores = n` set is replicated across n cores;
/// a multi-thread program must match the configured core count.
pub fn run_program(cfg: &ExperimentConfig, prog: &Program) -> Result<StatsReport, HarnessError> {
    let mut prog = prog.clone();
    if cfg.cores > 1 {
        if prog.threads.len() == 1 {
            prog.threads = vec![prog.threads[0].clone(); cfg.cores];
        } else if prog.threads.len() != cfg.cores {
            return Err(HarnessError::Constraint {
                rule: format!(
                    "cores = {} but the program defines {} threads",
                    cfg.cores,
                    prog.threads.len()
                ),
            });
        }
    }
    let cores = prog.threads.len();
    let mem = mem_for(cfg, cores);
    let mut sys = System::new(&prog, &cfg.cpu, &mem)?;
    let run = sys.run(cfg.budget)?;
    if cfg.verify && cores == 1 {
        verify_final_state(&prog, &run, cfg)?;
    }
    Ok(report_run(cfg, &mem, &run))
}

/// Final-state oracle for single-thread runs: the cycle-level outcome must
/// be bit-equal to the functional model's. (Multi-thread runs are verified
/// instruction-by-instruction at commit instead; their final interleaving
/// is schedule-dependent.)
fn verify_final_state(
    prog: &Program,
    run: &SystemRun,
    cfg: &ExperimentConfig,
) -> Result<(), HarnessError> {
    let steps = cfg.budget.saturating_mul(cfg.cpu.width as u64);
    let mut golden = functional_run(prog, steps)
        .map_err(|e| HarnessError::Verify(format!("golden model failed: {e}")))?;
    golden.state.canonicalize();
    let (g, s) = (&golden.state.threads[0], &run.state.threads[0]);
    for r in 0..32 {
        if g.regs[r] != s.regs[r] {
            return Err(HarnessError::Verify(format!(
                "diverged at r{r}: simulator {} vs golden {}",
                s.regs[r], g.regs[r]
            )));
        }
    }
    if g.pc != s.pc {
        return Err(HarnessError::Verify(format!(
            "diverged at pc: simulator {} vs golden {}",
            s.pc, g.pc
        )));
    }
    if run.state.mem != golden.state.mem {
        let keys: std::collections::BTreeSet<_> =
            run.state.mem.keys().chain(golden.state.mem.keys()).collect();
        let addr = keys
            .into_iter()
            .find(|a| run.state.mem.get(a) != golden.state.mem.get(a))
            .copied()
            .unwrap_or(0);
        return Err(HarnessError::Verify(format!(
            "diverged at mem[0x{addr:x}]: simulator {:?} vs golden {:?}",
            run.state.mem.get(&addr),
            golden.state.mem.get(&addr)
        )));
    }
    Ok(())
}

fn report_run(cfg: &ExperimentConfig, mem: &MemConfig, run: &SystemRun) -> StatsReport {
    let ms = &run.mem_stats;
    let mut scalars = vec![
        ("cycles".into(), run.cycles.to_string()),
        ("cores".into(), run.core_stats.len().to_string()),
        ("model".into(), cfg.cpu.model.to_string()),
        ("coherence".into(), mem.mode.to_string()),
        ("topology".into(), topology_label(&mem.topology)),
        ("seed".into(), cfg.seed.to_string()),
        ("bus_txns".into(), ms.bus_txns.to_string()),
        ("net_messages".into(), ms.net_messages.to_string()),
        ("net_avg_latency".into(), fmt_f(ms.net_avg_latency)),
        ("net_max_latency".into(), ms.net_max_latency.to_string()),
    ];
    for (i, edge) in LAT_EDGES.iter().enumerate() {
        scalars.push((format!("net_lat_le{edge}"), ms.net_hist[i].to_string()));
    }
    scalars.push((
        format!("net_lat_gt{}", LAT_EDGES[LAT_EDGES.len() - 1]),
        ms.net_hist[LAT_EDGES.len()].to_string(),
    ));
    scalars.push(("swmr_violations".into(), ms.swmr_violations.to_string()));

    let columns: Vec<String> = [
        "core", "retired", "ipc", "branch_acc", "mpki", "l1_hit", "llc_hit", "loads", "stores",
        "squash_branch", "squash_order", "squash_other", "ifetch_stall",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();

    let rate = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let mut rows = Vec::new();
    for (i, cs) in run.core_stats.iter().enumerate() {
        let cm = &ms.core[i];
        rows.push(vec![
            format!("core{i}"),
            cs.committed.to_string(),
            fmt_f(cs.ipc()),
            fmt_f(cs.branch_accuracy()),
            fmt_f(rate(1000 * cs.cond_mispredicts, cs.committed)),
            fmt_f(rate(cm.l1_hits, cm.accesses())),
            fmt_f(rate(cm.llc_fills, cm.accesses() - cm.l1_hits)),
            cs.loads.to_string(),
            cs.stores.to_string(),
            cs.cond_mispredicts.to_string(),
            cs.load_violations.to_string(),
            (cs.squashes.saturating_sub(cs.cond_mispredicts + cs.load_violations)).to_string(),
            cs.ifetch_stall_cycles.to_string(),
        ]);
    }
    // Summary row: sums for counts, aggregate ratios for rates.
    let sum = |f: &dyn Fn(&crate::cpu::CoreStats) -> u64| -> u64 {
        run.core_stats.iter().map(|c| f(c)).sum()
    };
    let msum = |f: &dyn Fn(&crate::memhier::CoreMemStats) -> u64| -> u64 {
        ms.core.iter().map(|c| f(c)).sum()
    };
    let retired = sum(&|c| c.committed);
    let mispred = sum(&|c| c.cond_mispredicts);
    let branches = sum(&|c| c.cond_branches);
    let acc = msum(&|c| c.accesses());
    let hits = msum(&|c| c.l1_hits);
    rows.push(vec![
        "all".into(),
        retired.to_string(),
        fmt_f(rate(retired, run.cycles)),
        fmt_f(if branches == 0 { 1.0 } else { 1.0 - mispred as f64 / branches as f64 }),
        fmt_f(rate(1000 * mispred, retired)),
        fmt_f(rate(hits, acc)),
        fmt_f(rate(msum(&|c| c.llc_fills), acc - hits)),
        sum(&|c| c.loads).to_string(),
        sum(&|c| c.stores).to_string(),
        mispred.to_string(),
        sum(&|c| c.load_violations).to_string(),
        sum(&|c| c.squashes).saturating_sub(mispred + sum(&|c| c.load_violations)).to_string(),
        sum(&|c| c.ifetch_stall_cycles).to_string(),
    ]);

    StatsReport { mode: Mode::Run, ok: true, scalars, columns, rows }
}

/// Replay a memory trace (one access at a time) and report per-access
/// latency and service class.
pub fn trace_report(cfg: &ExperimentConfig, ops: &[TraceOp]) -> Result<StatsReport, HarnessError> {
    let cores = if cfg.cores == 0 {
        ops.iter().map(|o| o.core + 1).max().unwrap_or(1)
    } else {
        cfg.cores
    };
    let mem = mem_for(cfg, cores);
    let (rows, stats) = run_mem_trace(&mem, cores, ops)?;
    let scalars = vec![
        ("accesses".into(), rows.len().to_string()),
        ("cores".into(), cores.to_string()),
        ("coherence".into(), mem.mode.to_string()),
        ("bus_txns".into(), stats.bus_txns.to_string()),
        ("net_messages".into(), stats.net_messages.to_string()),
        ("swmr_violations".into(), stats.swmr_violations.to_string()),
    ];
    let columns: Vec<String> =
        ["access", "core", "op", "addr", "value", "latency", "class"]
            .iter()
            .map(|s| s.to_string())
            .collect();
    let grid = rows
        .iter()
        .enumerate()
        .map(|(i, r)| {
            vec![
                format!("a{i}"),
                r.op.core.to_string(),
                match r.op.kind {
                    crate::memhier::AccessKind::Load => "ld".to_string(),
                    crate::memhier::AccessKind::Store => "st".to_string(),
                },
                format!("0x{:x}", r.op.addr),
                r.value.to_string(),
                r.latency.to_string(),
                r.class.to_string(),
            ]
        })
        .collect();
    Ok(StatsReport { mode: Mode::Run, ok: true, scalars, columns, rows: grid })
}

// ---------------------------------------------------------------------------
// mode = litmus

/// Load one litmus file, or every `.lit` file in a directory (sorted by
/// name so corpus order is stable).
pub fn load_litmus_corpus(path: &Path) -> Result<Vec<(String, LitmusTest)>, HarnessError> {
    litmus_sources(path)?
        .into_iter()
        .map(|(name, text)| Ok((name, parse_litmus(&text)?)))
        .collect()
}

fn litmus_sources(path: &Path) -> Result<Vec<(String, String)>, HarnessError> {
    let stem = |p: &Path| {
        p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "test".into())
    };
    if path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| HarnessError::Io { path: path.display().to_string(), msg: e.to_string() })?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "lit"))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(HarnessError::Io {
                path: path.display().to_string(),
                msg: "directory holds no .lit files".into(),
            });
        }
        files.into_iter().map(|p| Ok((stem(&p), read(&p)?))).collect()
    } else {
        Ok(vec![(stem(path), read(path)?)])
    }
}

fn fmt_cond(cond: &ExpectCond, test: &LitmusTest) -> String {
    match *cond {
        ExpectCond::Reg { idx, val } => format!("r{idx}={val}"),
        ExpectCond::Mem { var, val } => format!("{}={val}", test.vars[var].0),
    }
}

/// Check each test's `expect` lines against exhaustive enumeration and
/// tabulate the verdicts. `ok` is true only if every expectation holds.
pub fn litmus_report(tests: &[(String, LitmusTest)]) -> StatsReport {
    let mut ok = true;
    let columns: Vec<String> = ["case", "model", "outcomes", "expect", "cond", "verdict"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let mut rows = Vec::new();
    for (name, test) in tests {
        let mut sets: BTreeMap<Model, std::collections::BTreeSet<Outcome>> = BTreeMap::new();
        for (i, exp) in test.expectations.iter().enumerate() {
            let outcomes =
                sets.entry(exp.model).or_insert_with(|| enumerate_outcomes(test, exp.model));
            let pass = check_expectation(outcomes, exp);
            ok &= pass;
            let cond =
                exp.conds.iter().map(|c| fmt_cond(c, test)).collect::<Vec<_>>().join(" & ");
            rows.push(vec![
                format!("{name}.e{i}"),
                exp.model.to_string(),
                outcomes.len().to_string(),
                if exp.allowed { "allowed" } else { "forbidden" }.to_string(),
                cond,
                if pass { "pass" } else { "FAIL" }.to_string(),
            ]);
        }
    }
    let scalars = vec![
        ("tests".into(), tests.len().to_string()),
        ("expectations".into(), rows.len().to_string()),
    ];
    StatsReport { mode: Mode::Litmus, ok, scalars, columns, rows }
}

// ---------------------------------------------------------------------------
// mode = bpred

/// Short stable name for a predictor configuration.
pub fn predictor_label(p: &PredictorConfig) -> String {
    match *p {
        PredictorConfig::AlwaysNotTaken => "not_taken".into(),
        PredictorConfig::Bimodal { index_bits } => format!("bimodal(i{index_bits})"),
        PredictorConfig::TwoLevel { history_bits, index_bits } => {
            format!("two_level(h{history_bits},i{index_bits})")
        }
        PredictorConfig::Hybrid { bimodal_bits, history_bits, index_bits, chooser_bits } => {
            format!("hybrid(b{bimodal_bits},h{history_bits},i{index_bits},c{chooser_bits})")
        }
    }
}

fn bpred_report(cfg: &ExperimentConfig, trace: &[(u32, bool)]) -> Result<StatsReport, HarnessError> {
    let stats = evaluate_trace(cfg.cpu.bpred, trace)?;
    let columns: Vec<String> = ["predictor", "branches", "mispredicts", "accuracy", "mpki"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let rows = vec![vec![
        predictor_label(&cfg.cpu.bpred),
        stats.branches.to_string(),
        stats.mispredicts.to_string(),
        fmt_f(stats.accuracy),
        fmt_f(stats.mpki),
    ]];
    let scalars = vec![("records".into(), trace.len().to_string())];
    Ok(StatsReport { mode: Mode::Bpred, ok: true, scalars, columns, rows })
}

// ---------------------------------------------------------------------------
// mode = laws

/// All five closed-form calculators at representative points.
pub fn laws_report() -> StatsReport {
    let columns = vec!["point".to_string(), "value".to_string()];
    let mut rows = Vec::new();
    for g in 1..=3u32 {
        let s = laws::dennard_scale(g);
        rows.push(vec![format!("dennard.g{g}.density"), fmt_f(s.density)]);
        rows.push(vec![format!("dennard.g{g}.speed_gain"), fmt_f(s.speed_gain)]);
        rows.push(vec![format!("dennard.g{g}.power_density"), fmt_f(s.power_density)]);
    }
    for area in [2.0, 4.0] {
        let p = laws::pollack_performance(area).expect("valid area");
        rows.push(vec![format!("pollack.area{area:.0}"), fmt_f(p)]);
    }
    for n in [2u32, 4, 8, 16] {
        let s = laws::amdahl_speedup(0.9, n).expect("valid fraction");
        rows.push(vec![format!("amdahl.f0.9.n{n}"), fmt_f(s)]);
    }
    for years in [10.0, 20.0] {
        let g = laws::compound_growth(0.5, years).expect("valid rate");
        rows.push(vec![format!("compound.r0.5.y{years:.0}"), fmt_f(g)]);
    }
    for units in [4u32, 8, 16] {
        rows.push(vec![format!("bypass.u{units}"), laws::bypass_paths(units).to_string()]);
    }
    StatsReport { mode: Mode::Laws, ok: true, scalars: vec![], columns, rows }
}

// ---------------------------------------------------------------------------
// mode = check-protocol

fn check_report(cores: usize) -> StatsReport {
    let columns: Vec<String> = ["variant", "cores", "states", "quiescent", "stable", "result"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let mut ok = true;
    let mut rows = Vec::new();
    for variant in [Variant::Snoopy, Variant::Directory] {
        let cc = CheckConfig::new(variant, cores);
        match check(&cc) {
            Ok(rep) => {
                let stable = rep
                    .stable_set
                    .iter()
                    .map(|m| m.to_string())
                    .collect::<Vec<_>>()
                    .join("");
                rows.push(vec![
                    variant.to_string(),
                    cores.to_string(),
                    rep.states.to_string(),
                    rep.quiescent_states.to_string(),
                    stable,
                    "pass".into(),
                ]);
            }
            Err(e) => {
                ok = false;
                rows.push(vec![
                    variant.to_string(),
                    cores.to_string(),
                    "-".into(),
                    "-".into(),
                    "-".into(),
                    format!("FAIL: {e}"),
                ]);
            }
        }
    }
    StatsReport { mode: Mode::CheckProtocol, ok, scalars: vec![], columns, rows }
}

// ---------------------------------------------------------------------------
// Random workloads

/// Generate a random single-thread assembly program of roughly `len`
/// instructions: ALU work, loads and stores over the first `words` words of
/// memory, data-dependent forward branches, and bounded counted loops.
/// Programs terminate by construction (loops count down fresh counters,
/// branches only jump forward) and never touch an unaligned address.
pub fn random_program(rng: &mut impl Rng, len: usize, words: usize) -> String {
    assert!(words >= 1, "need a data window");

    struct Gen {
        out: String,
        pending: Option<String>,
        n: usize,
        label: usize,
        words: i32,
    }

    impl Gen {
        fn emit(&mut self, text: &str) {
            match self.pending.take() {
                Some(l) => self.out.push_str(&format!("{l}: {text}\n")),
                None => self.out.push_str(&format!("{text}\n")),
            }
            self.n += 1;
        }

        // r0 targets are legal (they retire as writes of zero) but rare.
        fn data_reg(&self, rng: &mut ChaCha8Rng) -> u8 {
            let r = rng.gen_range(0..13u8);
            if r == 0 && rng.gen_range(0..4) != 0 {
                1
            } else {
                r
            }
        }

        fn simple(&mut self, rng: &mut ChaCha8Rng) {
            const ALU: [&str; 7] = ["add", "sub", "and", "or", "xor", "slt", "mul"];
            let d = self.data_reg(rng);
            match rng.gen_range(0..10) {
                0..=4 => {
                    let op = ALU[rng.gen_range(0..ALU.len())];
                    let (a, b) = (rng.gen_range(0..13), rng.gen_range(0..13));
                    self.emit(&format!("{op} r{d}, r{a}, r{b}"));
                }
                5..=6 => {
                    let a = rng.gen_range(0..13);
                    let imm = rng.gen_range(-64..=64);
                    self.emit(&format!("addi r{d}, r{a}, {imm}"));
                }
                7..=8 => {
                    let k = 4 * rng.gen_range(0..self.words);
                    self.emit(&format!("lw r{}, {k}(r0)", d.max(1)));
                }
                _ => {
                    let s = rng.gen_range(0..13);
                    let k = 4 * rng.gen_range(0..self.words);
                    self.emit(&format!("sw r{s}, {k}(r0)"));
                }
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(rng.gen());
    let mut g = Gen { out: String::new(), pending: None, n: 0, label: 0, words: words as i32 };
    while g.n < len {
        match rng.gen_range(0..100) {
            0..=69 => g.simple(&mut rng),
            70..=84 => {
                // Forward branch over a short block; taken or not depends on
                // run-time data, so predictors genuinely mispredict.
                const BRS: [&str; 3] = ["beq", "bne", "blt"];
                let br = BRS[rng.gen_range(0..BRS.len())];
                let (a, b) = (rng.gen_range(0..13), rng.gen_range(0..13));
                let l = format!("f{}", g.label);
                g.label += 1;
                g.emit(&format!("{br} r{a}, r{b}, {l}"));
                for _ in 0..rng.gen_range(1..=3) {
                    g.simple(&mut rng);
                }
                g.pending = Some(l);
            }
            85..=95 => {
                // Counted loop on r13; bodies never write the counter.
                let c = rng.gen_range(2..=5);
                let l = format!("l{}", g.label);
                g.label += 1;
                g.emit(&format!("addi r13, r0, {c}"));
                g.pending = Some(l.clone());
                for _ in 0..rng.gen_range(1..=3) {
                    g.simple(&mut rng);
                }
                g.emit("addi r13, r13, -1");
                g.emit(&format!("bne r13, r0, {l}"));
            }
            _ => g.emit("fence"),
        }
    }
    g.emit("halt");
    g.out
}

/// One random schedule of a litmus test: threads and (under TSO) store-
/// buffer drains interleave uniformly at random. The small-step rules are
/// exactly the enumerators', so every outcome this produces lies in the
/// enumerated set.
pub fn random_litmus_outcome(test: &LitmusTest, model: Model, rng: &mut impl Rng) -> Outcome {
    let n = test.ops.len();
    let mut pcs = vec![0usize; n];
    let mut sbs: Vec<Vec<(usize, Word)>> = vec![Vec::new(); n];
    let mut mem = vec![0 as Word; test.vars.len()];
    let mut obs = vec![0 as Word; test.obs.len()];
    loop {
        let mut acts: Vec<(usize, bool)> = Vec::new();
        for t in 0..n {
            if pcs[t] < test.ops[t].len() {
                let ready = match test.ops[t][pcs[t]] {
                    LitmusOp::Fence => sbs[t].is_empty(),
                    _ => true,
                };
                if ready {
                    acts.push((t, false));
                }
            }
            if !sbs[t].is_empty() {
                acts.push((t, true));
            }
        }
        if acts.is_empty() {
            break;
        }
        let (t, drain) = acts[rng.gen_range(0..acts.len())];
        if drain {
            let (var, val) = sbs[t].remove(0);
            mem[var] = val;
            continue;
        }
        match test.ops[t][pcs[t]] {
            LitmusOp::Store { var, val } => match model {
                Model::Sc => mem[var] = val,
                Model::Tso => sbs[t].push((var, val)),
            },
            LitmusOp::Load { var, obs: o } => {
                obs[o] = sbs[t]
                    .iter()
                    .rev()
                    .find(|&&(v, _)| v == var)
                    .map(|&(_, v)| v)
                    .unwrap_or(mem[var]);
            }
            LitmusOp::Fence => {}
        }
        pcs[t] += 1;
    }
    Outcome { regs: obs, mem }
}

// ---------------------------------------------------------------------------
// Sweeps

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PenaltyPoint {
    pub depth: u64,
    /// Cycles each mispredicted branch costs over a predicted one.
    pub penalty: f64,
}

/// Measure the misprediction penalty at each front-end depth. `depth`
/// counts every stage a redirect must refill - the fetch stage, the
/// decode/rename stages between fetch and dispatch, and the dispatch stage
/// itself - so each point configures `fd_stages = depth - 2` interior
/// stages (depths must be at least 3).
///
/// The same alternating-branch loop runs twice per depth - once under a
/// bimodal predictor (which stays wrong on every taken repeat of the
/// alternating branch) and once under a two-level predictor (which learns
/// the pattern exactly) - and the penalty is the cycle difference per
/// extra misprediction. Caches are perfect so nothing else varies.
///
/// Panics if the measured penalty ever decreases with depth; that is the
/// sweep's defining invariant.
pub fn mispredict_penalty_sweep(depths: &[u64]) -> Result<Vec<PenaltyPoint>, HarnessError> {
    let iters = 400;
    let src = alternating_branch_program(iters);
    let prog = assemble(&src)?;
    let mem = MemConfig { mode: MemMode::Perfect, ..Default::default() };
    let mut out: Vec<PenaltyPoint> = Vec::new();
    for &depth in depths {
        assert!(depth >= 3, "depth counts fetch and dispatch too, so 3 is the minimum");
        let run = |bpred: PredictorConfig| -> Result<(u64, u64), HarnessError> {
            let cpu = CpuConfig { fd_stages: depth - 2, bpred, ..Default::default() };
            let mut sys = System::new(&prog, &cpu, &mem)?;
            let r = sys.run(10_000_000)?;
            Ok((r.cycles, r.core_stats[0].cond_mispredicts))
        };
        let (c_miss, m_miss) = run(PredictorConfig::Bimodal { index_bits: 12 })?;
        let (c_hit, m_hit) = run(PredictorConfig::TwoLevel { history_bits: 4, index_bits: 12 })?;
        assert!(
            m_miss > m_hit + iters as u64 / 4,
            "predictors must contrast: {m_miss} vs {m_hit} mispredicts"
        );
        let penalty = (c_miss - c_hit) as f64 / (m_miss - m_hit) as f64;
        if let Some(prev) = out.last() {
            assert!(
                penalty >= prev.penalty,
                "penalty fell from {:.2} to {penalty:.2} between depths {} and {depth}",
                prev.penalty,
                prev.depth
            );
        }
        out.push(PenaltyPoint { depth, penalty });
    }
    Ok(out)
}

fn alternating_branch_program(iters: u32) -> String {
    format!(
        "
        addi r1, r0, {iters}
        addi r3, r0, 1
    loop:
        sub  r2, r3, r2        # r2 toggles 0,1,0,1
        beq  r2, r0, skip      # taken every other iteration
        addi r4, r4, 1
    skip:
        addi r1, r1, -1
        bne  r1, r0, loop
        halt
    "
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AmdahlPoint {
    pub cores: usize,
    pub cycles: u64,
    pub speedup: f64,
    pub bound: f64,
}

/// Run the synthetic fork-join workload at each core count in `ns` (the
/// first entry must be 1; it is the baseline). A `parallel` fraction of
/// `total` fixed-size work units splits evenly across cores, the rest runs
/// on core 0 alone; nothing waits on anything, so core 0's serial-plus-
/// share time is the exact makespan.
///
/// Panics if any measured speedup exceeds the closed-form bound; that is
/// the sweep's defining invariant.
pub fn amdahl_sweep(
    parallel: f64,
    ns: &[usize],
    total: u64,
    cpu: &CpuConfig,
    mem: &MemConfig,
) -> Result<Vec<AmdahlPoint>, HarnessError> {
    assert!((0.0..1.0).contains(&parallel), "parallel fraction in [0,1)");
    assert_eq!(ns.first(), Some(&1), "the sweep baselines against one core");
    let par = (total as f64 * parallel).round() as u64;
    let ser = total - par;
    let mut baseline = 0u64;
    let mut out = Vec::new();
    for &n in ns {
        assert!(n >= 1 && par % n as u64 == 0, "parallel work must split evenly over {n} cores");
        let share = par / n as u64;
        assert!(share >= 1, "every core needs at least one work unit");
        let src = amdahl_program(ser, share, n);
        let prog = assemble(&src)?;
        let mut m = mem.clone();
        m.topology = fit_topology(&m.topology, n.max(2));
        let mut sys = System::new(&prog, cpu, &m)?;
        let r = sys.run(100_000_000)?;
        if n == 1 {
            baseline = r.cycles;
        }
        let speedup = baseline as f64 / r.cycles as f64;
        let bound = laws::amdahl_speedup(parallel, n as u32).expect("valid fraction");
        assert!(
            speedup <= bound + 1e-9,
            "measured speedup {speedup:.3} exceeds the bound {bound:.3} at n = {n}"
        );
        out.push(AmdahlPoint { cores: n, cycles: r.cycles, speedup, bound });
    }
    Ok(out)
}

fn amdahl_program(serial: u64, share: u64, cores: usize) -> String {
    let mut src = String::new();
    for t in 0..cores {
        let iters = if t == 0 { serial + share } else { share };
        src.push_str(&format!(
            "
            .thread {t}
            addi r1, r0, {iters}
            work{t}:
            addi r2, r2, 1
            addi r2, r2, 1
            addi r2, r2, 1
            addi r2, r2, 1
            addi r1, r1, -1
            bne  r1, r0, work{t}
            halt
            "
        ));
    }
    src
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memhier::AccessKind;

    const DEKKER: &str = "\
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

    #[test]
    fn config_defaults_are_the_documented_ones() {
        let c = parse_config("mode = run").unwrap();
        assert_eq!(c.cpu.width, 4);
        assert_eq!(c.mem.mode, MemMode::Snoopy);
        assert_eq!(c.mem.topology, Topology::Mesh { w: 2, h: 2 });
        assert_eq!(c.cpu.model, Model::Tso);
        assert_eq!(c.seed, 0);
        assert!(c.verify);
        assert!(!c.dims_given);
    }

    #[test]
    fn full_config_round_trips_every_section() {
        let c = parse_config(
            "
            mode = run
            seed = 9
            budget = 1000
            cores = 3
            verify = false

            [core]
            width = 2
            fd_stages = 6
            ooo = false
            model = sc
            predictor = hybrid
            bimodal_bits = 10
            history_bits = 6
            index_bits = 11
            chooser_bits = 9
            lat_mul = 5
            mem_dep_pred = false

            [mem]
            coherence = directory
            llc_lat = 12
            mem_lat = 80

            [noc]
            topology = ring
            dims = 6
            link_latency = 2
            queue_depth = 4
            ",
        )
        .unwrap();
        assert_eq!(c.cores, 3);
        assert!(!c.verify);
        assert!(!c.cpu.ooo);
        assert_eq!(c.cpu.model, Model::Sc);
        assert_eq!(
            c.cpu.bpred,
            PredictorConfig::Hybrid {
                bimodal_bits: 10,
                history_bits: 6,
                index_bits: 11,
                chooser_bits: 9
            }
        );
        assert_eq!(c.mem.mode, MemMode::Directory);
        assert_eq!(c.mem.topology, Topology::Ring { nodes: 6 });
        assert!(c.dims_given);
        assert_eq!(c.mem.link_lat, 2);
        assert_eq!(c.mem.queue_depth, 4);
    }

    #[test]
    fn unknown_key_is_rejected_with_its_line() {
        let err = parse_config("mode = run\nseed = 1\nwdith = 4").unwrap_err();
        match err {
            HarnessError::UnknownKey { line, key, section } => {
                assert_eq!(line, 3);
                assert_eq!(key, "wdith");
                assert_eq!(section, "run");
            }
            other => panic!("wrong error: {other}"),
        }
    }

    #[test]
    fn sections_scope_their_keys() {
        // `width` belongs to [core], not [mem].
        let err = parse_config("[mem]\nwidth = 4").unwrap_err();
        assert!(matches!(err, HarnessError::UnknownKey { line: 2, .. }), "{err}");
    }

    #[test]
    fn width_guard_names_the_rule_and_can_be_lifted() {
        let err = parse_config("[core]\nwidth = 16").unwrap_err();
        match err {
            HarnessError::Constraint { rule } => {
                assert!(rule.contains("between 2 and 8"), "{rule}")
            }
            other => panic!("wrong error: {other}"),
        }
        let c = parse_config("allow_unrealistic = true\n[core]\nwidth = 16").unwrap();
        assert_eq!(c.cpu.width, 16);
    }

    #[test]
    fn bad_value_reports_the_line() {
        let err = parse_config("seed = 1\n[core]\nwidth = pony").unwrap_err();
        assert!(matches!(err, HarnessError::Parse { line: 3, .. }), "{err}");
        let err = parse_config("just words").unwrap_err();
        assert!(matches!(err, HarnessError::Parse { line: 1, .. }), "{err}");
    }

    #[test]
    fn load_config_requires_referenced_files() {
        let dir = std::env::temp_dir().join(format!("mcsim-cfg-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let cfg_path = dir.join("exp.cfg");
        fs::write(&cfg_path, "mode = run\nprogram = missing.asm").unwrap();
        let err = load_config(&cfg_path).unwrap_err();
        assert!(matches!(err, HarnessError::MissingFile { .. }), "{err}");

        fs::write(dir.join("missing.asm"), "halt\n").unwrap();
        let c = load_config(&cfg_path).unwrap();
        assert!(c.program.as_ref().unwrap().ends_with("missing.asm"));
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn topology_fitting_matches_core_counts() {
        assert_eq!(fit_topology(&Topology::Mesh { w: 2, h: 2 }, 8), Topology::Mesh { w: 2, h: 4 });
        assert_eq!(fit_topology(&Topology::Mesh { w: 2, h: 2 }, 16), Topology::Mesh { w: 4, h: 4 });
        assert_eq!(fit_topology(&Topology::Mesh { w: 2, h: 2 }, 7), Topology::Mesh { w: 1, h: 7 });
        assert_eq!(fit_topology(&Topology::Ring { nodes: 4 }, 6), Topology::Ring { nodes: 6 });
        assert_eq!(parse_topology("torus4x4").unwrap(), (Topology::Torus { w: 4, h: 4 }, true));
        assert_eq!(parse_topology("bus8").unwrap(), (Topology::Bus { nodes: 8 }, true));
        assert_eq!(parse_topology("mesh").unwrap(), (Topology::Mesh { w: 2, h: 2 }, false));
        assert!(parse_topology("donut").is_err());
    }

    #[test]
    fn rng_streams_are_stable_per_label() {
        use rand::RngCore;
        let (mut a, mut b) = (rng_for(9, "gen"), rng_for(9, "gen"));
        assert_eq!(a.next_u64(), b.next_u64());
        let mut c = rng_for(9, "other");
        let mut a2 = rng_for(9, "gen");
        assert_ne!(a2.next_u64(), c.next_u64());
    }

    #[test]
    fn laws_table_covers_all_five_calculators() {
        let r = laws_report();
        let kv = report_stats(&r, OutFormat::Kv);
        for prefix in ["dennard.", "pollack.", "amdahl.", "compound.", "bypass."] {
            assert!(kv.contains(prefix), "missing {prefix} in:\n{kv}");
        }
        assert!(kv.contains("dennard.g1.density=2.0408"));
        assert!(kv.contains("dennard.g1.speed_gain=0.4286"));
        assert!(kv.contains("pollack.area2=1.4142"));
        assert!(kv.contains("compound.r0.5.y20=3325.2567"));
    }

    #[test]
    fn litmus_verdicts_match_expectations() {
        let t = parse_litmus(DEKKER).unwrap();
        let r = litmus_report(&[("dekker".into(), t)]);
        assert!(r.ok);
        assert_eq!(r.rows.len(), 2);
        assert_eq!(r.rows[0][5], "pass");
        // Outcome counts: 3 under SC, 4 under TSO.
        let sc_row = r.rows.iter().find(|row| row[1] == "sc").unwrap();
        let tso_row = r.rows.iter().find(|row| row[1] == "tso").unwrap();
        assert_eq!(sc_row[2], "3");
        assert_eq!(tso_row[2], "4");

        // A wrong expectation flips ok and marks its row.
        let bad = DEKKER.replace(
            "# expect allowed   (r0=0, r1=0) under tso",
            "# expect forbidden (r0=0, r1=0) under tso",
        );
        let t = parse_litmus(&bad).unwrap();
        let r = litmus_report(&[("dekker".into(), t)]);
        assert!(!r.ok);
        assert!(r.rows.iter().any(|row| row[5] == "FAIL"));
    }

    #[test]
    fn run_report_has_a_row_per_core_plus_summary() {
        let cfg = ExperimentConfig::default();
        let prog = assemble(
            "
            .thread 0
            addi r1, r0, 7
            sw r1, 0(r0)
            halt
            .thread 1
            addi r2, r0, 8
            sw r2, 4(r0)
            halt
            ",
        )
        .unwrap();
        let r = run_program(&cfg, &prog).unwrap();
        assert!(r.ok);
        assert_eq!(r.rows.len(), 3); // 2 cores + summary
        let kv = report_stats(&r, OutFormat::Kv);
        assert!(kv.contains("core0.ipc="));
        assert!(kv.contains("core1.ipc="));
        assert!(kv.contains("all.retired=6"));
        let csv = report_stats(&r, OutFormat::Csv);
        assert_eq!(csv.lines().count(), 4); // header + 3 rows
        assert!(csv.starts_with("core,retired,ipc"));
        let table = report_stats(&r, OutFormat::Table);
        assert!(table.contains("core0"));
        assert!(table.contains("cycles"));
    }

    #[test]
    fn replication_spreads_one_thread_over_n_cores() {
        let cfg = ExperimentConfig { cores: 4, ..Default::default() };
        let prog = assemble("addi r1, r0, 3\nsw r1, 0(r0)\nhalt\n").unwrap();
        let r = run_program(&cfg, &prog).unwrap();
        assert_eq!(r.rows.len(), 5);

        let two = assemble(".thread 0\nhalt\n.thread 1\nhalt\n").unwrap();
        let cfg = ExperimentConfig { cores: 3, ..Default::default() };
        assert!(matches!(run_program(&cfg, &two), Err(HarnessError::Constraint { .. })));
    }

    #[test]
    fn empty_run_reports_zeroes_not_nan() {
        use crate::cpu::CoreStats;
        use crate::isa::ArchState;
        use crate::memhier::{CoreMemStats, MemStats};
        let run = SystemRun {
            state: ArchState { threads: vec![], mem: BTreeMap::new() },
            cycles: 0,
            core_stats: vec![CoreStats::default()],
            mem_stats: MemStats {
                core: vec![CoreMemStats::default()],
                ..Default::default()
            },
        };
        let cfg = ExperimentConfig::default();
        let rep = report_run(&cfg, &cfg.mem, &run);
        let kv = report_stats(&rep, OutFormat::Kv);
        assert!(!kv.contains("NaN") && !kv.contains("inf"), "{kv}");
        assert!(kv.contains("core0.ipc=0.0000"));
        assert!(kv.contains("core0.mpki=0.0000"));
    }

    #[test]
    fn reports_are_byte_identical_across_runs() {
        let cfg = parse_config("mode = run\nseed = 5\n[mem]\ncoherence = directory").unwrap();
        let prog = assemble(
            "
            .thread 0
            addi r1, r0, 41
            sw r1, 0(r0)
            halt
            .thread 1
            lw r2, 0(r0)
            halt
            ",
        )
        .unwrap();
        let a = run_program(&cfg, &prog).unwrap();
        let b = run_program(&cfg, &prog).unwrap();
        for f in [OutFormat::Kv, OutFormat::Csv, OutFormat::Table] {
            assert_eq!(report_stats(&a, f), report_stats(&b, f));
        }
    }

    #[test]
    fn run_mode_verifies_against_the_golden_model() {
        let cfg = ExperimentConfig::default();
        let prog = assemble(
            "
            addi r1, r0, 10
            addi r2, r0, 0
            loop: add r2, r2, r1
            addi r1, r1, -1
            bne r1, r0, loop
            sw r2, 12(r0)
            halt
            ",
        )
        .unwrap();
        let r = run_program(&cfg, &prog).unwrap();
        assert!(r.ok);
        let kv = report_stats(&r, OutFormat::Kv);
        assert!(kv.contains("swmr_violations=0"));
    }

    #[test]
    fn trace_mode_reports_latency_and_class_rows() {
        let cfg = parse_config("mode = run").unwrap();
        let ops = vec![
            TraceOp { core: 0, kind: AccessKind::Store, addr: 0x40, value: 7 },
            TraceOp { core: 1, kind: AccessKind::Load, addr: 0x40, value: 0 },
            TraceOp { core: 1, kind: AccessKind::Load, addr: 0x40, value: 0 },
        ];
        let r = trace_report(&cfg, &ops).unwrap();
        assert_eq!(r.rows.len(), 3);
        assert_eq!(r.rows[1][4], "7"); // core 1 reads core 0's store
        assert_eq!(r.rows[2][6], "l1"); // second read hits locally
        let kv = report_stats(&r, OutFormat::Kv);
        assert!(kv.contains("a1.value=7"));
    }

    #[test]
    fn check_protocol_reports_both_variants() {
        let r = check_report(2);
        assert!(r.ok);
        assert_eq!(r.rows.len(), 2);
        assert_eq!(r.rows[0][0], "snoopy");
        assert_eq!(r.rows[1][0], "directory");
        for row in &r.rows {
            assert_eq!(row[5], "pass");
            assert!(row[4].contains('M'), "stable set lists M: {:?}", row);
        }
    }

    #[test]
    fn random_programs_terminate_and_match_golden() {
        for seed in 0..4 {
            let mut rng = rng_for(seed, "random-program");
            let src = random_program(&mut rng, 120, 16);
            let prog = assemble(&src).expect("generated programs assemble");
            let mut golden = functional_run(&prog, 1_000_000).expect("terminates");
            golden.state.canonicalize();
            let cfg = ExperimentConfig::default();
            let mem = MemConfig { mode: MemMode::Perfect, ..Default::default() };
            let mut sys = System::new(&prog, &cfg.cpu, &mem).unwrap();
            let run = sys.run(1_000_000).unwrap();
            assert_eq!(run.state.threads[0].regs, golden.state.threads[0].regs, "seed {seed}");
            assert_eq!(run.state.mem, golden.state.mem, "seed {seed}");
        }
    }

    #[test]
    fn random_litmus_schedules_stay_inside_the_enumerated_set() {
        let t = parse_litmus(DEKKER).unwrap();
        let allowed = enumerate_outcomes(&t, Model::Tso);
        let mut rng = rng_for(3, "litmus-schedules");
        let mut seen = std::collections::BTreeSet::new();
        for _ in 0..1000 {
            let o = random_litmus_outcome(&t, Model::Tso, &mut rng);
            assert!(allowed.contains(&o), "outcome {o:?} not enumerated");
            seen.insert(o);
        }
        // The relaxed outcome (both loads miss both stores) shows up.
        assert!(seen.iter().any(|o| o.regs == [0, 0]), "never saw the TSO reordering");
        // SC schedules stay inside the smaller SC set.
        let sc = enumerate_outcomes(&t, Model::Sc);
        for _ in 0..300 {
            let o = random_litmus_outcome(&t, Model::Sc, &mut rng);
            assert!(sc.contains(&o));
        }
    }

    #[test]
    fn penalty_sweep_is_monotone_and_tracks_depth() {
        let pts = mispredict_penalty_sweep(&[4, 8]).unwrap();
        assert_eq!(pts.len(), 2);
        // Penalty tracks the refilled depth one-for-one, so the gap between
        // depths 4 and 8 is about 4 cycles.
        let gap = pts[1].penalty - pts[0].penalty;
        assert!((3.0..=5.0).contains(&gap), "gap {gap}");
        assert!((pts[0].penalty - 4.0).abs() <= 1.0, "penalty {} at depth 4", pts[0].penalty);
        assert!((pts[1].penalty - 8.0).abs() <= 1.0, "penalty {} at depth 8", pts[1].penalty);
    }

    #[test]
    fn amdahl_sweep_respects_and_approaches_the_bound() {
        let cpu = CpuConfig::default();
        let mem = MemConfig { mode: MemMode::Perfect, ..Default::default() };
        let pts = amdahl_sweep(0.9, &[1, 2, 4], 800, &cpu, &mem).unwrap();
        assert_eq!(pts[0].speedup, 1.0);
        for p in &pts {
            assert!(p.speedup <= p.bound + 1e-9);
        }
        let last = pts.last().unwrap();
        assert!(
            last.speedup >= 0.9 * last.bound,
            "contention-free speedup {:.3} under 0.9x bound {:.3}",
            last.speedup,
            last.bound
        );
    }

    #[test]
    fn cycle_level_litmus_outcomes_stay_inside_the_enumerated_sets() {
        // The pipelined cores with real store buffers and a coherent
        // hierarchy may only ever produce outcomes the abstract model
        // enumerates, whichever backend carries the traffic.
        let corpus =
            load_litmus_corpus(Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../../litmus")))
                .unwrap();
        assert!(corpus.len() >= 10);
        for (name, test) in &corpus {
            for model in [Model::Sc, Model::Tso] {
                let allowed = enumerate_outcomes(test, model);
                for mode in [MemMode::Snoopy, MemMode::Directory, MemMode::Perfect] {
                    let cpu = CpuConfig { model, ..Default::default() };
                    let mut mem = MemConfig { mode, ..Default::default() };
                    mem.topology =
                        fit_topology(&mem.topology, test.isa.threads.len().max(2));
                    let mut sys = System::new(&test.isa, &cpu, &mem).unwrap();
                    let run = sys.run(1_000_000).unwrap();
                    let outcome = Outcome {
                        regs: test
                            .obs
                            .iter()
                            .map(|&(t, r)| run.state.threads[t].regs[r as usize])
                            .collect(),
                        mem: test.vars.iter().map(|&(_, a)| run.state.read_mem(a)).collect(),
                    };
                    assert!(
                        allowed.contains(&outcome),
                        "{name} on {mode} under {model} reached {outcome:?}, \
                         which the model forbids"
                    );
                }
            }
        }
    }
}
