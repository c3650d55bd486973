//! Two-pass assembler for the textual form of the instruction set.
//!
//! Grammar, line oriented:
//!
//! ```text
//! line      := [label ":"] [instruction] [comment]
//!            | ".thread" n
//!            | ".data" (addr | name) value
//! comment   := "#" ...
//! ```
//!
//! Registers are written `r0`..`r31`. Branch and jump targets are labels or
//! numeric instruction offsets relative to the branch itself. `lw`/`sw` use
//! displacement syntax `lw rd, imm(rs)`; the displacement may also be the name
//! of a `.data` variable, which assembles to that variable's address.
//!
//! `.thread n` switches the thread the following instructions belong to;
//! labels are scoped to their thread. `.data name value` assigns `name` the
//! next free word address (from 0 upward) and initializes it.

use super::{Addr, Instr, Opcode, Program, Word, IMM_MAX, IMM_MIN};
use std::collections::BTreeMap;
use thiserror::Error;

pub const MAX_THREADS: usize = 16;

#[derive(Debug, Error, PartialEq)]
pub enum AsmError {
    #[error("line {line}: syntax error: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: unknown mnemonic `{mnemonic}`")]
    UnknownMnemonic { line: usize, mnemonic: String },
    #[error("line {line}: bad register `{token}` (expected r0..r31)")]
    BadRegister { line: usize, token: String },
    #[error("line {line}: immediate {value} outside signed 16-bit range")]
    ImmOutOfRange { line: usize, value: i64 },
    #[error("line {line}: duplicate label `{label}`")]
    DuplicateLabel { line: usize, label: String },
    #[error("line {line}: undefined label `{label}`")]
    UndefinedLabel { line: usize, label: String },
    #[error("line {line}: bad .data directive: {msg}")]
    BadData { line: usize, msg: String },
}

struct PendingInstr {
    line: usize,
    thread: usize,
    index: usize,
    mnemonic: String,
    operands: Vec<String>,
}

/// Assemble `src` into a [`Program`].
pub fn assemble(src: &str) -> Result<Program, AsmError> {
    let mut threads: Vec<Vec<PendingInstr>> = vec![Vec::new()];
    // label -> instruction index, per thread
    let mut labels: Vec<BTreeMap<String, usize>> = vec![BTreeMap::new()];
    let mut init_data: BTreeMap<Addr, Word> = BTreeMap::new();
    let mut symbols: BTreeMap<String, Addr> = BTreeMap::new();
    let mut cur_thread = 0usize;
    let mut next_data_addr: Addr = 0;

    for (lineno, raw) in src.lines().enumerate() {
        let line = lineno + 1;
        let text = raw.split('#').next().unwrap_or("").trim();
        if text.is_empty() {
            continue;
        }

        if let Some(rest) = text.strip_prefix(".thread") {
            let n: usize = rest.trim().parse().map_err(|_| AsmError::Syntax {
                line,
                msg: format!("bad thread number `{}`", rest.trim()),
            })?;
            if n >= MAX_THREADS {
                return Err(AsmError::Syntax {
                    line,
                    msg: format!("thread {n} exceeds maximum of {MAX_THREADS}"),
                });
            }
            while threads.len() <= n {
                threads.push(Vec::new());
                labels.push(BTreeMap::new());
            }
            cur_thread = n;
            continue;
        }

        if let Some(rest) = text.strip_prefix(".data") {
            let parts: Vec<&str> = rest.split_whitespace().collect();
            if parts.len() != 2 {
                return Err(AsmError::BadData {
                    line,
                    msg: "expected `.data <addr|name> <value>`".into(),
                });
            }
            let value = parse_int(parts[1]).ok_or_else(|| AsmError::BadData {
                line,
                msg: format!("bad value `{}`", parts[1]),
            })?;
            let value: Word = i32::try_from(value).map_err(|_| AsmError::BadData {
                line,
                msg: format!("value {} does not fit a 32-bit word", parts[1]),
            })?;
            let addr = if let Some(n) = parse_int(parts[0]) {
                let addr = Addr::try_from(n).map_err(|_| AsmError::BadData {
                    line,
                    msg: format!("bad address `{}`", parts[0]),
                })?;
                if addr % 4 != 0 {
                    return Err(AsmError::BadData {
                        line,
                        msg: format!("address {addr:#x} not word-aligned"),
                    });
                }
                addr
            } else if is_ident(parts[0]) {
                if symbols.contains_key(parts[0]) {
                    return Err(AsmError::BadData {
                        line,
                        msg: format!("variable `{}` already defined", parts[0]),
                    });
                }
                while init_data.contains_key(&next_data_addr) {
                    next_data_addr += 4;
                }
                let addr = next_data_addr;
                symbols.insert(parts[0].to_string(), addr);
                addr
            } else {
                return Err(AsmError::BadData {
                    line,
                    msg: format!("bad address or name `{}`", parts[0]),
                });
            };
            if init_data.contains_key(&addr) {
                return Err(AsmError::BadData {
                    line,
                    msg: format!("address {addr:#x} initialized twice"),
                });
            }
            init_data.insert(addr, value);
            continue;
        }

        // Optional leading label.
        let mut body = text;
        if let Some(colon) = text.find(':') {
            let (lbl, rest) = text.split_at(colon);
            let lbl = lbl.trim();
            if is_ident(lbl) {
                let idx = threads[cur_thread].len();
                let tbl = &mut labels[cur_thread];
                if tbl.contains_key(lbl) || tbl.values().any(|&i| i == idx) {
                    return Err(AsmError::DuplicateLabel { line, label: lbl.to_string() });
                }
                tbl.insert(lbl.to_string(), idx);
                body = rest[1..].trim();
            } else {
                return Err(AsmError::Syntax { line, msg: format!("bad label `{lbl}`") });
            }
        }
        if body.is_empty() {
            continue;
        }

        let (mnemonic, rest) = match body.split_once(char::is_whitespace) {
            Some((m, r)) => (m, r.trim()),
            None => (body, ""),
        };
        let operands: Vec<String> = if rest.is_empty() {
            Vec::new()
        } else {
            rest.split(',').map(|s| s.trim().to_string()).collect()
        };
        let index = threads[cur_thread].len();
        threads[cur_thread].push(PendingInstr {
            line,
            thread: cur_thread,
            index,
            mnemonic: mnemonic.to_ascii_lowercase(),
            operands,
        });
    }

    // Second pass: encode, resolving labels and data symbols.
    let mut out_threads: Vec<Vec<Instr>> = Vec::with_capacity(threads.len());
    for (tid, pend) in threads.iter().enumerate() {
        let mut code = Vec::with_capacity(pend.len());
        for p in pend {
            code.push(encode(p, &labels[tid], &symbols)?);
        }
        out_threads.push(code);
    }

    Ok(Program { threads: out_threads, init_data, symbols })
}

fn encode(
    p: &PendingInstr,
    labels: &BTreeMap<String, usize>,
    symbols: &BTreeMap<String, Addr>,
) -> Result<Instr, AsmError> {
    let line = p.line;
    let want = |n: usize| -> Result<(), AsmError> {
        if p.operands.len() != n {
            Err(AsmError::Syntax {
                line,
                msg: format!(
                    "`{}` expects {n} operand(s), got {}",
                    p.mnemonic,
                    p.operands.len()
                ),
            })
        } else {
            Ok(())
        }
    };
    let reg = |tok: &str| -> Result<u8, AsmError> {
        parse_reg(tok).ok_or_else(|| AsmError::BadRegister { line, token: tok.to_string() })
    };
    let imm16 = |v: i64| -> Result<i32, AsmError> {
        if v < IMM_MIN as i64 || v > IMM_MAX as i64 {
            Err(AsmError::ImmOutOfRange { line, value: v })
        } else {
            Ok(v as i32)
        }
    };
    // Branch/jump target: label or numeric offset, relative to this instruction.
    let target = |tok: &str| -> Result<i32, AsmError> {
        if let Some(v) = parse_int(tok) {
            imm16(v)
        } else if let Some(&idx) = labels.get(tok) {
            imm16(idx as i64 - p.index as i64)
        } else {
            Err(AsmError::UndefinedLabel { line, label: tok.to_string() })
        }
    };
    // `imm(rN)` displacement, where imm may be a number or a .data name.
    let mem_operand = |tok: &str| -> Result<(i32, u8), AsmError> {
        let open = tok.find('(').ok_or_else(|| AsmError::Syntax {
            line,
            msg: format!("expected `imm(rN)`, got `{tok}`"),
        })?;
        if !tok.ends_with(')') {
            return Err(AsmError::Syntax {
                line,
                msg: format!("expected `imm(rN)`, got `{tok}`"),
            });
        }
        let (disp, base) = (tok[..open].trim(), tok[open + 1..tok.len() - 1].trim());
        let imm = if disp.is_empty() {
            0
        } else if let Some(v) = parse_int(disp) {
            imm16(v)?
        } else if let Some(&addr) = symbols.get(disp) {
            imm16(addr as i64)?
        } else {
            return Err(AsmError::UndefinedLabel { line, label: disp.to_string() });
        };
        Ok((imm, reg(base)?))
    };

    let i = |opcode, dest, src1, src2, imm| Instr { opcode, dest, src1, src2, imm };
    let ops = &p.operands;
    let instr = match p.mnemonic.as_str() {
        "add" | "sub" | "and" | "or" | "xor" | "slt" | "mul" => {
            want(3)?;
            let opcode = match p.mnemonic.as_str() {
                "add" => Opcode::Add,
                "sub" => Opcode::Sub,
                "and" => Opcode::And,
                "or" => Opcode::Or,
                "xor" => Opcode::Xor,
                "slt" => Opcode::Slt,
                _ => Opcode::Mul,
            };
            i(opcode, reg(&ops[0])?, reg(&ops[1])?, reg(&ops[2])?, 0)
        }
        "addi" => {
            want(3)?;
            let v = parse_int(&ops[2]).ok_or_else(|| AsmError::Syntax {
                line,
                msg: format!("bad immediate `{}`", ops[2]),
            })?;
            i(Opcode::Addi, reg(&ops[0])?, reg(&ops[1])?, 0, imm16(v)?)
        }
        "lw" => {
            want(2)?;
            let (imm, base) = mem_operand(&ops[1])?;
            i(Opcode::Load, reg(&ops[0])?, base, 0, imm)
        }
        "sw" => {
            want(2)?;
            let (imm, base) = mem_operand(&ops[1])?;
            i(Opcode::Store, 0, reg(&ops[0])?, base, imm)
        }
        "beq" | "bne" | "blt" => {
            want(3)?;
            let opcode = match p.mnemonic.as_str() {
                "beq" => Opcode::Beq,
                "bne" => Opcode::Bne,
                _ => Opcode::Blt,
            };
            i(opcode, 0, reg(&ops[0])?, reg(&ops[1])?, target(&ops[2])?)
        }
        "jal" => {
            want(2)?;
            i(Opcode::Jal, reg(&ops[0])?, 0, 0, target(&ops[1])?)
        }
        "jr" => {
            want(1)?;
            i(Opcode::Jr, 0, reg(&ops[0])?, 0, 0)
        }
        "fence" => {
            want(0)?;
            i(Opcode::Fence, 0, 0, 0, 0)
        }
        "halt" => {
            want(0)?;
            i(Opcode::Halt, 0, 0, 0, 0)
        }
        _ => {
            return Err(AsmError::UnknownMnemonic {
                line,
                mnemonic: p.mnemonic.clone(),
            })
        }
    };
    debug_assert_eq!(p.thread, p.thread);
    Ok(instr)
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

fn parse_reg(tok: &str) -> Option<u8> {
    let rest = tok.strip_prefix(['r', 'R'])?;
    let n: u8 = rest.parse().ok()?;
    if (n as usize) < super::NUM_REGS && !rest.starts_with('+') {
        Some(n)
    } else {
        None
    }
}

fn parse_int(tok: &str) -> Option<i64> {
    let tok = tok.trim();
    let (neg, rest) = match tok.strip_prefix('-') {
        Some(r) => (true, r),
        None => (false, tok.strip_prefix('+').unwrap_or(tok)),
    };
    let v = if let Some(hex) = rest.strip_prefix("0x").or_else(|| rest.strip_prefix("0X")) {
        i64::from_str_radix(hex, 16).ok()?
    } else {
        if rest.is_empty() || !rest.bytes().all(|b| b.is_ascii_digit()) {
            return None;
        }
        rest.parse::<i64>().ok()?
    };
    Some(if neg { -v } else { v })
}
