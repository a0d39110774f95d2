//! A small two-pass Thumb/Thumb-2 assembler.
//!
//! It exists to build test firmware with exact ground truth: every emitted
//! byte is tagged as code, data or padding, and every instruction is
//! recorded with a normalised listing line. The encoder is written from the
//! architecture encoding tables and shares no code with the decoder under
//! test.
//!
//! Source syntax is lower-case UAL close to what the decoder prints:
//!
//! ```text
//! .fn
//! reset:  ldr  r0, pool0      @ label operands are resolved
//!         movs r1, #34
//!         bl   handler
//!         b    .
//! pool0:  .word 0x00021f14
//! ```

use std::collections::BTreeMap;

use crate::expr::Expr;
use crate::AsmError;

/// Classification of one emitted byte.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ByteKind {
    Code,
    Data,
    Padding,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ListingLine {
    pub address: u32,
    pub width: u8,
    pub text: String,
}

/// Output of [`assemble`].
#[derive(Debug, Clone)]
pub struct Program {
    pub base: u32,
    pub bytes: Vec<u8>,
    pub kinds: Vec<ByteKind>,
    pub listing: Vec<ListingLine>,
    pub labels: BTreeMap<String, u32>,
    /// Labels introduced with `.fn`, in source order.
    pub functions: Vec<(String, u32)>,
}

impl Program {
    pub fn label(&self, name: &str) -> u32 {
        *self
            .labels
            .get(name)
            .unwrap_or_else(|| panic!("no label `{name}`"))
    }

    pub fn end(&self) -> u32 {
        self.base + self.bytes.len() as u32
    }

    /// Half-open address ranges whose bytes are `Data`.
    pub fn data_ranges(&self) -> Vec<(u32, u32)> {
        let mut out: Vec<(u32, u32)> = Vec::new();
        for (i, k) in self.kinds.iter().enumerate() {
            if *k != ByteKind::Data {
                continue;
            }
            let a = self.base + i as u32;
            match out.last_mut() {
                Some(last) if last.1 == a => last.1 = a + 1,
                _ => out.push((a, a + 1)),
            }
        }
        out
    }
}

const CONDS: [&str; 15] = [
    "eq", "ne", "cs", "cc", "mi", "pl", "vs", "vc", "hi", "ls", "ge", "lt", "gt", "le", "al",
];

fn cond_code(s: &str) -> Option<u8> {
    match s {
        "hs" => Some(2),
        "lo" => Some(3),
        _ => CONDS.iter().position(|c| *c == s).map(|p| p as u8),
    }
}

fn reg_num(s: &str) -> Option<u8> {
    match s {
        "sp" | "r13" => Some(13),
        "lr" | "r14" => Some(14),
        "pc" | "r15" => Some(15),
        "ip" => Some(12),
        _ => {
            let n: u8 = s.strip_prefix('r')?.parse().ok()?;
            (n < 13).then_some(n)
        }
    }
}

fn reg_name(r: u8) -> String {
    match r {
        13 => "sp".into(),
        14 => "lr".into(),
        15 => "pc".into(),
        n => format!("r{n}"),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ShiftKind {
    Lsl,
    Lsr,
    Asr,
    Ror,
}

impl ShiftKind {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "lsl" => Self::Lsl,
            "lsr" => Self::Lsr,
            "asr" => Self::Asr,
            "ror" => Self::Ror,
            _ => return None,
        })
    }
    fn bits(self) -> u16 {
        self as u16
    }
    fn name(self) -> &'static str {
        ["lsl", "lsr", "asr", "ror"][self as usize]
    }
}

#[derive(Debug, Clone)]
enum MemOff {
    None,
    Imm(Expr),
    Reg(u8, u8),
}

#[derive(Debug, Clone)]
enum Opnd {
    Reg(u8, bool),
    Imm(Expr),
    Mem { base: u8, off: MemOff, wb: bool },
    List(u16),
    Target(Expr),
    Shift(ShiftKind, Expr),
    Sym(String),
}

#[derive(Debug, Clone)]
struct Insn {
    line: usize,
    name: String,
    setflags: bool,
    cond: Option<u8>,
    wide: bool,
    in_it: bool,
    it_pattern: Option<String>,
    ops: Vec<Opnd>,
    width: u32,
}

#[derive(Debug, Clone)]
enum Item {
    Label(String, bool),
    Data(usize, Vec<Expr>),
    Bytes(Vec<u8>),
    Space(u32),
    Align(u32, bool),
    Org(Expr),
    Insn(Insn),
}

const BASE_NAMES: &[&str] = &[
    "lsl", "lsr", "asr", "ror", "add", "sub", "adc", "sbc", "rsb", "mov", "mvn", "cmp", "cmn",
    "tst", "teq", "and", "orr", "eor", "bic", "mul", "ldr", "str", "ldrb", "strb", "ldrh", "strh",
    "ldrsb", "ldrsh", "ldrd", "strd", "ldm", "stm", "stmdb", "push", "pop", "bx", "blx", "bl",
    "b", "cbz", "cbnz", "tbb", "tbh", "svc", "bkpt", "udf", "nop", "yield", "wfe", "wfi", "sev",
    "adr", "sxtb", "sxth", "uxtb", "uxth", "rev", "rev16", "revsh", "cpsie", "cpsid", "msr",
    "mrs", "dsb", "dmb", "isb", "movw", "movt", "addw", "subw", "udiv", "sdiv", "mla", "mls",
    "ubfx", "sbfx", "bfi", "clz",
];

const S_CAPABLE: &[&str] = &[
    "lsl", "lsr", "asr", "ror", "add", "sub", "adc", "sbc", "rsb", "mov", "mvn", "and", "orr",
    "eor", "bic", "mul",
];

/// Names whose 32-bit encoding carries a `.w` suffix in listings.
const WIDE_SUFFIXED: &[&str] = &[
    "b", "ldr", "str", "ldrb", "strb", "ldrh", "strh", "ldrsb", "ldrsh", "mov", "mvn", "add",
    "sub", "adc", "sbc", "rsb", "cmp", "cmn", "tst", "and", "orr", "eor", "bic", "lsl", "lsr",
    "asr", "ror", "ldm", "stm", "sxtb", "sxth", "uxtb", "uxth", "mul",
];

const SYSREGS: &[(&str, u16)] = &[
    ("apsr", 0),
    ("ipsr", 5),
    ("epsr", 6),
    ("msp", 8),
    ("psp", 9),
    ("primask", 16),
    ("basepri", 17),
    ("faultmask", 19),
    ("control", 20),
];

fn split_top(s: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut depth = 0i32;
    let mut cur = String::new();
    for c in s.chars() {
        match c {
            '[' | '{' | '(' => depth += 1,
            ']' | '}' | ')' => depth -= 1,
            _ => {}
        }
        if c == ',' && depth == 0 {
            out.push(cur.trim().to_string());
            cur.clear();
        } else {
            cur.push(c);
        }
    }
    if !cur.trim().is_empty() {
        out.push(cur.trim().to_string());
    }
    out
}

fn parse_reglist(s: &str) -> Result<u16, AsmError> {
    let inner = s.trim_start_matches('{').trim_end_matches('}');
    let mut mask = 0u16;
    for part in inner.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        if let Some((a, b)) = part.split_once('-') {
            let a = reg_num(a.trim()).ok_or_else(|| AsmError::Syntax(format!("bad reg `{a}`")))?;
            let b = reg_num(b.trim()).ok_or_else(|| AsmError::Syntax(format!("bad reg `{b}`")))?;
            for r in a..=b {
                mask |= 1 << r;
            }
        } else {
            let r = reg_num(part).ok_or_else(|| AsmError::Syntax(format!("bad reg `{part}`")))?;
            mask |= 1 << r;
        }
    }
    Ok(mask)
}

fn parse_operand(s: &str) -> Result<Opnd, AsmError> {
    let s = s.trim();
    if let Some(rest) = s.strip_prefix('#') {
        return Ok(Opnd::Imm(Expr::parse(rest)?));
    }
    if s.starts_with('{') {
        return Ok(Opnd::List(parse_reglist(s)?));
    }
    if s.starts_with('[') {
        let wb = s.ends_with('!');
        let body = s.trim_end_matches('!');
        let body = body
            .strip_prefix('[')
            .and_then(|b| b.strip_suffix(']'))
            .ok_or_else(|| AsmError::Syntax(format!("bad memory operand `{s}`")))?;
        let parts = split_top(body);
        let base = reg_num(&parts[0]).ok_or_else(|| AsmError::Syntax(format!("bad base `{s}`")))?;
        let off = match parts.len() {
            1 => MemOff::None,
            2 if parts[1].starts_with('#') => MemOff::Imm(Expr::parse(&parts[1][1..])?),
            2 => MemOff::Reg(
                reg_num(&parts[1]).ok_or_else(|| AsmError::Syntax(format!("bad index `{s}`")))?,
                0,
            ),
            3 => {
                let rm = reg_num(&parts[1]).ok_or_else(|| AsmError::Syntax(format!("bad index `{s}`")))?;
                let sh = parts[2]
                    .strip_prefix("lsl")
                    .map(|r| r.trim().trim_start_matches('#'))
                    .ok_or_else(|| AsmError::Syntax(format!("bad shift `{s}`")))?;
                MemOff::Reg(rm, Expr::parse(sh)?.constant()? as u8)
            }
            _ => return Err(AsmError::Syntax(format!("bad memory operand `{s}`"))),
        };
        return Ok(Opnd::Mem { base, off, wb });
    }
    let (core, wb) = match s.strip_suffix('!') {
        Some(c) => (c, true),
        None => (s, false),
    };
    if let Some(r) = reg_num(core) {
        return Ok(Opnd::Reg(r, wb));
    }
    if let Some((k, amt)) = s.split_once(' ') {
        if let Some(kind) = ShiftKind::parse(k) {
            return Ok(Opnd::Shift(kind, Expr::parse(amt.trim().trim_start_matches('#'))?));
        }
    }
    if SYSREGS.iter().any(|(n, _)| *n == s) || s == "sy" || s == "i" || s == "f" {
        return Ok(Opnd::Sym(s.to_string()));
    }
    if CONDS.contains(&s) || s == "hs" || s == "lo" {
        return Ok(Opnd::Sym(s.to_string()));
    }
    Ok(Opnd::Target(Expr::parse(s)?))
}

struct ItState {
    conds: Vec<u8>,
}

fn split_mnemonic(raw: &str, it: &mut Option<ItState>, line: usize) -> Result<(String, bool, Option<u8>, bool, bool), AsmError> {
    let mut m = raw.to_string();
    let wide = if let Some(x) = m.strip_suffix(".w") {
        m = x.to_string();
        true
    } else {
        false
    };
    let mut in_it = false;
    let mut cond = None;
    if let Some(state) = it.as_mut() {
        if !state.conds.is_empty() {
            let c = state.conds.remove(0);
            let suffix = CONDS[c as usize];
            m = m
                .strip_suffix(suffix)
                .ok_or_else(|| AsmError::Line(line, format!("`{raw}` must carry IT condition `{suffix}`")))?
                .to_string();
            cond = Some(c);
            in_it = true;
        }
        if state.conds.is_empty() {
            *it = None;
        }
    }
    // Conditional branches outside IT blocks.
    if !in_it && m.len() == 3 && m.starts_with('b') && !BASE_NAMES.contains(&m.as_str()) {
        if let Some(c) = cond_code(&m[1..]) {
            return Ok(("b".into(), false, Some(c), wide, false));
        }
    }
    if BASE_NAMES.contains(&m.as_str()) {
        return Ok((m, false, cond, wide, in_it));
    }
    if let Some(base) = m.strip_suffix('s') {
        if S_CAPABLE.contains(&base) {
            return Ok((base.to_string(), true, cond, wide, in_it));
        }
    }
    Err(AsmError::Line(line, format!("unknown mnemonic `{raw}`")))
}

fn is_wide_only(name: &str) -> bool {
    matches!(
        name,
        "bl" | "stmdb" | "tbb" | "tbh" | "msr" | "mrs" | "dsb" | "dmb" | "isb" | "movw" | "movt"
            | "addw" | "subw" | "udiv" | "sdiv" | "mla" | "mls" | "ubfx" | "sbfx" | "bfi"
            | "clz" | "ldrd" | "strd" | "teq"
    )
}

fn parse_source(src: &str) -> Result<Vec<Item>, AsmError> {
    let mut items = Vec::new();
    let mut it: Option<ItState> = None;
    let mut next_is_fn = false;
    for (idx, raw_line) in src.lines().enumerate() {
        let line = idx + 1;
        let mut text = raw_line;
        for marker in ["@", "//", ";"] {
            if let Some(p) = text.find(marker) {
                // keep string literals intact
                if !text[..p].contains('"') {
                    text = &text[..p];
                }
            }
        }
        let mut text = text.trim();
        // labels
        loop {
            let Some(colon) = text.find(':') else { break };
            let cand = &text[..colon];
            if cand.is_empty() || !cand.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.' || c == '$') {
                break;
            }
            items.push(Item::Label(cand.to_string(), std::mem::take(&mut next_is_fn)));
            text = text[colon + 1..].trim();
        }
        if text.is_empty() {
            continue;
        }
        let (head, rest) = match text.find(char::is_whitespace) {
            Some(p) => (&text[..p], text[p..].trim()),
            None => (text, ""),
        };
        let head = head.to_ascii_lowercase();
        if head.starts_with('.') {
            match head.as_str() {
                ".fn" => next_is_fn = true,
                ".word" | ".long" => items.push(Item::Data(4, split_top(rest).iter().map(|e| Expr::parse(e)).collect::<Result<_, _>>()?)),
                ".hword" | ".short" => items.push(Item::Data(2, split_top(rest).iter().map(|e| Expr::parse(e)).collect::<Result<_, _>>()?)),
                ".byte" => items.push(Item::Data(1, split_top(rest).iter().map(|e| Expr::parse(e)).collect::<Result<_, _>>()?)),
                ".ascii" | ".asciz" => {
                    let s = rest.trim().trim_matches('"');
                    let mut b = s.as_bytes().to_vec();
                    if head == ".asciz" {
                        b.push(0);
                    }
                    items.push(Item::Bytes(b));
                }
                ".space" => items.push(Item::Space(Expr::parse(rest)?.constant()? as u32)),
                ".balign" => items.push(Item::Align(Expr::parse(rest)?.constant()? as u32, false)),
                ".nopalign" => items.push(Item::Align(Expr::parse(rest)?.constant()? as u32, true)),
                ".org" => items.push(Item::Org(Expr::parse(rest)?)),
                ".thumb" | ".syntax" | ".thumb_func" => {}
                _ => return Err(AsmError::Line(line, format!("unknown directive `{head}`"))),
            }
            continue;
        }
        if head.starts_with("it") && head.len() <= 5 && head[2..].chars().all(|c| c == 't' || c == 'e') {
            if it.is_some() {
                return Err(AsmError::Line(line, "nested IT block".into()));
            }
            let first = cond_code(rest.trim()).ok_or_else(|| AsmError::Line(line, format!("bad IT condition `{rest}`")))?;
            let mut conds = vec![first];
            for c in head[2..].chars() {
                conds.push(if c == 't' { first } else { first ^ 1 });
            }
            items.push(Item::Insn(Insn {
                line,
                name: "it".into(),
                setflags: false,
                cond: Some(first),
                wide: false,
                in_it: false,
                it_pattern: Some(head[2..].to_string()),
                ops: vec![],
                width: 2,
            }));
            it = Some(ItState { conds });
            continue;
        }
        let (name, setflags, cond, wide, in_it) = split_mnemonic(&head, &mut it, line)?;
        let ops = if rest.is_empty() {
            vec![]
        } else {
            split_top(rest).iter().map(|o| parse_operand(o)).collect::<Result<Vec<_>, _>>().map_err(|e| AsmError::Line(line, e.to_string()))?
        };
        let width = if wide || is_wide_only(&name) { 4 } else { 2 };
        items.push(Item::Insn(Insn { line, name, setflags, cond, wide, in_it, it_pattern: None, ops, width }));
    }
    Ok(items)
}

/// Assembles `src` for load address `base`.
pub fn assemble(base: u32, src: &str) -> Result<Program, AsmError> {
    let items = parse_source(src)?;

    // Pass 1: layout.
    let mut labels = BTreeMap::new();
    let mut functions = Vec::new();
    let mut addr = base;
    let mut sizes = Vec::with_capacity(items.len());
    for item in &items {
        let size = match item {
            Item::Label(name, is_fn) => {
                if labels.insert(name.clone(), addr).is_some() {
                    return Err(AsmError::Syntax(format!("duplicate label `{name}`")));
                }
                if *is_fn {
                    functions.push((name.clone(), addr));
                }
                0
            }
            Item::Data(w, exprs) => (*w * exprs.len()) as u32,
            Item::Bytes(b) => b.len() as u32,
            Item::Space(n) => *n,
            Item::Align(n, _) => (n - addr % n) % n,
            Item::Org(e) => {
                let target = e.constant()? as u32;
                if target < addr {
                    return Err(AsmError::Syntax(format!(".org 0x{target:x} moves backwards from 0x{addr:x}")));
                }
                target - addr
            }
            Item::Insn(i) => i.width,
        };
        sizes.push(size);
        addr += size;
    }

    // Pass 2: encode.
    let mut prog = Program {
        base,
        bytes: Vec::new(),
        kinds: Vec::new(),
        listing: Vec::new(),
        labels,
        functions,
    };
    let mut addr = base;
    for (item, size) in items.iter().zip(sizes) {
        match item {
            Item::Label(..) => {}
            Item::Data(w, exprs) => {
                for e in exprs {
                    let v = e.eval(&prog.labels, addr)?;
                    let bytes = (v as u32).to_le_bytes();
                    prog.bytes.extend_from_slice(&bytes[..*w]);
                    prog.kinds.extend(std::iter::repeat(ByteKind::Data).take(*w));
                }
            }
            Item::Bytes(b) => {
                prog.bytes.extend_from_slice(b);
                prog.kinds.extend(std::iter::repeat(ByteKind::Data).take(b.len()));
            }
            Item::Space(n) => {
                prog.bytes.extend(std::iter::repeat(0).take(*n as usize));
                prog.kinds.extend(std::iter::repeat(ByteKind::Data).take(*n as usize));
            }
            Item::Align(_, nop) => {
                for k in 0..size {
                    let b = if *nop { [0x00, 0xbf][(k % 2) as usize] } else { 0 };
                    prog.bytes.push(b);
                    prog.kinds.push(ByteKind::Padding);
                }
            }
            Item::Org(_) => {
                prog.bytes.extend(std::iter::repeat(0).take(size as usize));
                prog.kinds.extend(std::iter::repeat(ByteKind::Padding).take(size as usize));
            }
            Item::Insn(insn) => {
                let (hws, text) = encode(insn, addr, &prog.labels).map_err(|e| match e {
                    AsmError::Line(..) => e,
                    other => AsmError::Line(insn.line, other.to_string()),
                })?;
                debug_assert_eq!(hws.len() as u32 * 2, size);
                for hw in &hws {
                    prog.bytes.extend_from_slice(&hw.to_le_bytes());
                }
                prog.kinds.extend(std::iter::repeat(ByteKind::Code).take(size as usize));
                prog.listing.push(ListingLine { address: addr, width: size as u8, text });
            }
        }
        addr += size;
    }
    Ok(prog)
}

// ---------------------------------------------------------------------------
// Encoding

struct Ctx<'a> {
    insn: &'a Insn,
    addr: u32,
    labels: &'a BTreeMap<String, u32>,
}

impl Ctx<'_> {
    fn err<T>(&self, msg: impl Into<String>) -> Result<T, AsmError> {
        Err(AsmError::Line(self.insn.line, msg.into()))
    }
    fn ops(&self) -> &[Opnd] {
        &self.insn.ops
    }
    fn reg(&self, i: usize) -> Result<u8, AsmError> {
        match self.ops().get(i) {
            Some(Opnd::Reg(r, _)) => Ok(*r),
            other => self.err(format!("operand {i}: expected register, got {other:?}")),
        }
    }
    fn lo(&self, i: usize) -> Result<u8, AsmError> {
        let r = self.reg(i)?;
        if r > 7 {
            return self.err(format!("operand {i}: low register required"));
        }
        Ok(r)
    }
    fn imm(&self, i: usize) -> Result<i64, AsmError> {
        match self.ops().get(i) {
            Some(Opnd::Imm(e)) => e.eval(self.labels, self.addr),
            other => self.err(format!("operand {i}: expected immediate, got {other:?}")),
        }
    }
    fn target(&self, i: usize) -> Result<u32, AsmError> {
        match self.ops().get(i) {
            Some(Opnd::Target(e)) => Ok(e.eval(self.labels, self.addr)? as u32),
            other => self.err(format!("operand {i}: expected label, got {other:?}")),
        }
    }
    fn is_reg(&self, i: usize) -> bool {
        matches!(self.ops().get(i), Some(Opnd::Reg(..)))
    }
    fn is_imm(&self, i: usize) -> bool {
        matches!(self.ops().get(i), Some(Opnd::Imm(_)))
    }
    fn n(&self) -> usize {
        self.ops().len()
    }
    /// Narrow flag-setting encodings set flags exactly when outside IT.
    fn want_narrow_flags(&self) -> Result<(), AsmError> {
        if self.insn.setflags == self.insn.in_it {
            return self.err("narrow encoding: `s` suffix required outside IT and forbidden inside");
        }
        Ok(())
    }
    fn want_no_flags(&self) -> Result<(), AsmError> {
        if self.insn.setflags {
            return self.err("encoding does not set flags");
        }
        Ok(())
    }
    fn shift(&self, i: usize) -> Result<(ShiftKind, u32), AsmError> {
        match self.ops().get(i) {
            None => Ok((ShiftKind::Lsl, 0)),
            Some(Opnd::Shift(k, e)) => Ok((*k, e.eval(self.labels, self.addr)? as u32)),
            other => self.err(format!("operand {i}: expected shift, got {other:?}")),
        }
    }
}

fn mnemonic_text(insn: &Insn) -> String {
    let mut s = insn.name.clone();
    if insn.setflags {
        s.push('s');
    }
    if let Some(c) = insn.cond {
        if insn.name != "it" {
            s.push_str(CONDS[c as usize]);
        }
    }
    if insn.width == 4 && WIDE_SUFFIXED.contains(&insn.name.as_str()) {
        s.push_str(".w");
    }
    s
}

fn list_text(mask: u16) -> String {
    let regs: Vec<String> = (0..16).filter(|r| mask & (1 << r) != 0).map(reg_name).collect();
    format!("{{{}}}", regs.join(", "))
}

fn thumb_expand_encode(v: u32) -> Option<u16> {
    let b0 = v & 0xff;
    if v <= 0xff {
        return Some(v as u16);
    }
    if v == (b0 << 16) | b0 {
        return Some(0x100 | b0 as u16);
    }
    let b1 = (v >> 8) & 0xff;
    if v == (b1 << 24) | (b1 << 8) {
        return Some(0x200 | b1 as u16);
    }
    if v == b0 * 0x0101_0101 {
        return Some(0x300 | b0 as u16);
    }
    for rot in 8..32u32 {
        let un = v.rotate_left(rot);
        if un <= 0xff && un & 0x80 != 0 {
            return Some(((rot as u16) << 7) | (un as u16 & 0x7f));
        }
    }
    None
}

fn split_imm12(imm12: u16) -> (u16, u16) {
    let i = (imm12 >> 11) & 1;
    let imm3 = (imm12 >> 8) & 7;
    let imm8 = imm12 & 0xff;
    (i << 10, (imm3 << 12) | imm8)
}

fn encode_bl_like(off: i64, link: bool) -> Option<[u16; 2]> {
    if !(-(1 << 24)..(1 << 24)).contains(&off) || off % 2 != 0 {
        return None;
    }
    let off = off as u32;
    let s = (off >> 24) & 1;
    let i1 = (off >> 23) & 1;
    let i2 = (off >> 22) & 1;
    let j1 = (!(i1 ^ s)) & 1;
    let j2 = (!(i2 ^ s)) & 1;
    let imm10 = (off >> 12) & 0x3ff;
    let imm11 = (off >> 1) & 0x7ff;
    let hw1 = 0xf000 | (s << 10) | imm10;
    let base2 = if link { 0xd000 } else { 0x9000 };
    let hw2 = base2 | (j1 << 13) | (j2 << 11) | imm11;
    Some([hw1 as u16, hw2 as u16])
}

fn encode_bcond_w(off: i64, cond: u8) -> Option<[u16; 2]> {
    if !(-(1 << 20)..(1 << 20)).contains(&off) || off % 2 != 0 {
        return None;
    }
    let off = off as u32;
    let s = (off >> 20) & 1;
    let j2 = (off >> 19) & 1;
    let j1 = (off >> 18) & 1;
    let imm6 = (off >> 12) & 0x3f;
    let imm11 = (off >> 1) & 0x7ff;
    let hw1 = 0xf000 | (s << 10) | ((cond as u32) << 6) | imm6;
    let hw2 = 0x8000 | (j1 << 13) | (j2 << 11) | imm11;
    Some([hw1 as u16, hw2 as u16])
}

fn dp_wide_op(name: &str) -> Option<u16> {
    Some(match name {
        "and" | "tst" => 0b0000,
        "bic" => 0b0001,
        "orr" | "mov" => 0b0010,
        "mvn" => 0b0011,
        "eor" | "teq" => 0b0100,
        "add" | "cmn" => 0b1000,
        "adc" => 0b1010,
        "sbc" => 0b1011,
        "sub" | "cmp" => 0b1101,
        "rsb" => 0b1110,
        _ => return None,
    })
}

fn encode(insn: &Insn, addr: u32, labels: &BTreeMap<String, u32>) -> Result<(Vec<u16>, String), AsmError> {
    let c = Ctx { insn, addr, labels };
    let name = insn.name.as_str();
    let s = insn.setflags as u16;
    let pc_al = (addr + 4) & !3;
    let mnem = mnemonic_text(insn);
    let rn = |r: u8| reg_name(r);

    // Each arm returns halfwords and the operand text.
    let (hws, ops_text): (Vec<u16>, String) = match name {
        "it" => {
            let first = insn.cond.unwrap();
            let pat = insn.it_pattern.as_deref().unwrap();
            let n = pat.len() + 1;
            let mut mask = 0u16;
            for (k, ch) in pat.chars().enumerate() {
                let bit = if ch == 't' { first & 1 } else { (first & 1) ^ 1 };
                mask |= (bit as u16) << (3 - k);
            }
            mask |= 1 << (4 - n);
            return Ok((vec![0xbf00 | ((first as u16) << 4) | mask], format!("it{pat} {}", CONDS[first as usize])));
        }
        "nop" | "yield" | "wfe" | "wfi" | "sev" if !insn.wide => {
            let k = ["nop", "yield", "wfe", "wfi", "sev"].iter().position(|x| *x == name).unwrap() as u16;
            (vec![0xbf00 | (k << 4)], String::new())
        }
        "svc" | "bkpt" | "udf" => {
            let v = c.imm(0)?;
            if !(0..=255).contains(&v) {
                return c.err("imm8 out of range");
            }
            let base = match name {
                "svc" => 0xdf00,
                "bkpt" => 0xbe00,
                _ => 0xde00,
            };
            (vec![base | v as u16], format!("#{v}"))
        }
        "cpsie" | "cpsid" => {
            let f = match c.ops().first() {
                Some(Opnd::Sym(s)) if s == "i" => 2,
                Some(Opnd::Sym(s)) if s == "f" => 1,
                _ => return c.err("cps expects i or f"),
            };
            let im = (name == "cpsid") as u16;
            (vec![0xb660 | (im << 4) | f], if f == 2 { "i".into() } else { "f".into() })
        }
        "dsb" | "dmb" | "isb" => {
            let k = match name {
                "dsb" => 0x4,
                "dmb" => 0x5,
                _ => 0x6,
            };
            (vec![0xf3bf, 0x8f0f | (k << 4)], "sy".into())
        }
        "msr" | "mrs" => {
            let sym_idx = if name == "msr" { 0 } else { 1 };
            let sysm = match c.ops().get(sym_idx) {
                Some(Opnd::Sym(s)) => SYSREGS.iter().find(|(n, _)| n == s).map(|x| x.1),
                _ => None,
            }
            .ok_or_else(|| AsmError::Line(insn.line, "bad system register".into()))?;
            let sname = SYSREGS.iter().find(|x| x.1 == sysm).unwrap().0;
            if name == "msr" {
                let r = c.reg(1)?;
                (vec![0xf380 | r as u16, 0x8800 | sysm], format!("{sname}, {}", rn(r)))
            } else {
                let r = c.reg(0)?;
                (vec![0xf3ef, 0x8000 | ((r as u16) << 8) | sysm], format!("{}, {sname}", rn(r)))
            }
        }
        "b" => {
            let t = c.target(0)?;
            let off = t as i64 - (addr as i64 + 4);
            let text = format!("0x{t:x}");
            match (insn.wide, insn.cond.filter(|_| !insn.in_it)) {
                (false, Some(cond)) => {
                    if !(-256..=254).contains(&off) {
                        return c.err("b<cond> out of range");
                    }
                    (vec![0xd000 | ((cond as u16) << 8) | ((off >> 1) as u16 & 0xff)], text)
                }
                (false, None) => {
                    if !(-2048..=2046).contains(&off) {
                        return c.err("b out of range");
                    }
                    (vec![0xe000 | ((off >> 1) as u16 & 0x7ff)], text)
                }
                (true, Some(cond)) => (
                    encode_bcond_w(off, cond).ok_or_else(|| AsmError::Line(insn.line, "b<cond>.w out of range".into()))?.to_vec(),
                    text,
                ),
                (true, None) => (
                    encode_bl_like(off, false).ok_or_else(|| AsmError::Line(insn.line, "b.w out of range".into()))?.to_vec(),
                    text,
                ),
            }
        }
        "bl" => {
            let t = c.target(0)?;
            let off = t as i64 - (addr as i64 + 4);
            (
                encode_bl_like(off, true).ok_or_else(|| AsmError::Line(insn.line, "bl out of range".into()))?.to_vec(),
                format!("0x{t:x}"),
            )
        }
        "bx" | "blx" => {
            let r = c.reg(0)?;
            let base = if name == "bx" { 0x4700 } else { 0x4780 };
            (vec![base | ((r as u16) << 3)], rn(r))
        }
        "cbz" | "cbnz" => {
            let r = c.lo(0)?;
            let t = c.target(1)?;
            let off = t as i64 - (addr as i64 + 4);
            if !(0..=126).contains(&off) || off % 2 != 0 {
                return c.err("cbz out of range");
            }
            let off = off as u16;
            let op = (name == "cbnz") as u16;
            (
                vec![0xb100 | (op << 11) | (((off >> 6) & 1) << 9) | (((off >> 1) & 0x1f) << 3) | r as u16],
                format!("{}, 0x{t:x}", rn(r)),
            )
        }
        "tbb" | "tbh" => {
            let Some(Opnd::Mem { base, off: MemOff::Reg(rm, sh), .. }) = c.ops().first() else {
                return c.err("tbb/tbh expects [rn, rm]");
            };
            let h = (name == "tbh") as u16;
            if (h == 1 && *sh != 1) || (h == 0 && *sh != 0) {
                return c.err("tbh requires lsl #1, tbb none");
            }
            let text = if h == 1 {
                format!("[{}, {}, lsl #1]", rn(*base), rn(*rm))
            } else {
                format!("[{}, {}]", rn(*base), rn(*rm))
            };
            (vec![0xe8d0 | *base as u16, 0xf000 | (h << 4) | *rm as u16], text)
        }
        "push" | "pop" if !insn.wide => {
            let Some(Opnd::List(mask)) = c.ops().first() else { return c.err("expected register list") };
            let extra = if name == "push" { 1 << 14 } else { 1 << 15 };
            if mask & !(0xff | extra) != 0 {
                return c.err("narrow push/pop register list");
            }
            let m = ((mask & extra) != 0) as u16;
            let base = if name == "push" { 0xb400 } else { 0xbc00 };
            (vec![base | (m << 8) | (mask & 0xff)], list_text(*mask))
        }
        "stm" | "ldm" | "stmdb" => {
            let (Some(Opnd::Reg(base, wb)), Some(Opnd::List(mask))) = (c.ops().first(), c.ops().get(1)) else {
                return c.err("expected rn{!}, {list}");
            };
            let text = format!("{}{}, {}", rn(*base), if *wb { "!" } else { "" }, list_text(*mask));
            if insn.width == 2 {
                if *base > 7 || mask & !0xff != 0 {
                    return c.err("narrow ldm/stm needs low registers");
                }
                let in_list = mask & (1 << base) != 0;
                if name == "stm" && !wb || name == "ldm" && (*wb == in_list) {
                    return c.err("narrow ldm/stm writeback rule");
                }
                let op = if name == "stm" { 0xc000 } else { 0xc800 };
                (vec![op | ((*base as u16) << 8) | mask], text)
            } else {
                let op = match name {
                    "stm" => 0xe880,
                    "ldm" => 0xe890,
                    _ => 0xe900,
                };
                (vec![op | ((*wb as u16) << 5) | *base as u16, *mask], text)
            }
        }
        "adr" => {
            let r = c.lo(0)?;
            let t = c.target(1)?;
            let imm = t as i64 - pc_al as i64;
            if !(0..=1020).contains(&imm) || imm % 4 != 0 {
                return c.err("adr out of range");
            }
            (vec![0xa000 | ((r as u16) << 8) | (imm / 4) as u16], format!("{}, 0x{t:x}", rn(r)))
        }
        "ldr" | "str" | "ldrb" | "strb" | "ldrh" | "strh" | "ldrsb" | "ldrsh" => encode_ldst(&c, name, pc_al)?,
        "ldrd" | "strd" => {
            let rt = c.reg(0)?;
            let rt2 = c.reg(1)?;
            let l = (name == "ldrd") as u16;
            let (base, imm, p, w, text) = match (c.ops().get(2), c.ops().get(3)) {
                (Some(Opnd::Mem { base, off: MemOff::Imm(e), wb }), None) => {
                    let v = e.eval(labels, addr)?;
                    (*base, v, 1u16, *wb as u16, format!("[{}, #{v}]{}", rn(*base), if *wb { "!" } else { "" }))
                }
                (Some(Opnd::Mem { base, off: MemOff::None, wb: false }), None) => (*base, 0, 1, 0, format!("[{}, #0]", rn(*base))),
                (Some(Opnd::Mem { base, off: MemOff::None, wb: false }), Some(Opnd::Imm(e))) => {
                    let v = e.eval(labels, addr)?;
                    (*base, v, 0, 1, format!("[{}], #{v}", rn(*base)))
                }
                _ => return c.err("ldrd/strd operand"),
            };
            if imm % 4 != 0 || imm.abs() > 1020 {
                return c.err("ldrd offset");
            }
            let u = (imm >= 0) as u16;
            (
                vec![0xe840 | (p << 8) | (u << 7) | (w << 5) | (l << 4) | base as u16, ((rt as u16) << 12) | ((rt2 as u16) << 8) | (imm.unsigned_abs() / 4) as u16],
                format!("{}, {}, {text}", rn(rt), rn(rt2)),
            )
        }
        "movw" | "movt" => {
            let r = c.reg(0)?;
            let v = c.imm(1)?;
            if !(0..=0xffff).contains(&v) {
                return c.err("imm16 out of range");
            }
            let v = v as u16;
            let base = if name == "movw" { 0xf240 } else { 0xf2c0 };
            let hw1 = base | (((v >> 11) & 1) << 10) | (v >> 12);
            let hw2 = (((v >> 8) & 7) << 12) | ((r as u16) << 8) | (v & 0xff);
            (vec![hw1, hw2], format!("{}, #{v}", rn(r)))
        }
        "addw" | "subw" => {
            let rd = c.reg(0)?;
            let rnn = c.reg(1)?;
            let v = c.imm(2)?;
            if !(0..=4095).contains(&v) {
                return c.err("imm12 out of range");
            }
            let (i, lo) = split_imm12(v as u16);
            let base = if name == "addw" { 0xf200 } else { 0xf2a0 };
            (vec![base | i | rnn as u16, lo | ((rd as u16) << 8)], format!("{}, {}, #{v}", rn(rd), rn(rnn)))
        }
        "udiv" | "sdiv" => {
            let (rd, rnn, rm) = (c.reg(0)?, c.reg(1)?, c.reg(2)?);
            let base = if name == "udiv" { 0xfbb0 } else { 0xfb90 };
            (vec![base | rnn as u16, 0xf0f0 | ((rd as u16) << 8) | rm as u16], format!("{}, {}, {}", rn(rd), rn(rnn), rn(rm)))
        }
        "mla" | "mls" => {
            let (rd, rnn, rm, ra) = (c.reg(0)?, c.reg(1)?, c.reg(2)?, c.reg(3)?);
            let op2 = (name == "mls") as u16;
            (
                vec![0xfb00 | rnn as u16, ((ra as u16) << 12) | ((rd as u16) << 8) | (op2 << 4) | rm as u16],
                format!("{}, {}, {}, {}", rn(rd), rn(rnn), rn(rm), rn(ra)),
            )
        }
        "mul" => {
            if insn.wide {
                let (rd, rnn, rm) = (c.reg(0)?, c.reg(1)?, c.reg(2)?);
                c.want_no_flags()?;
                (vec![0xfb00 | rnn as u16, 0xf000 | ((rd as u16) << 8) | rm as u16], format!("{}, {}, {}", rn(rd), rn(rnn), rn(rm)))
            } else {
                c.want_narrow_flags()?;
                let (rd, rnn, rm) = (c.lo(0)?, c.lo(1)?, c.lo(2)?);
                if rd != rm {
                    return c.err("muls rdm, rn, rdm");
                }
                (vec![0x4340 | ((rnn as u16) << 3) | rd as u16], format!("{}, {}, {}", rn(rd), rn(rnn), rn(rm)))
            }
        }
        "ubfx" | "sbfx" | "bfi" => {
            let (rd, rnn) = (c.reg(0)?, c.reg(1)?);
            let lsb = c.imm(2)? as u16;
            let width = c.imm(3)? as u16;
            if width == 0 || lsb + width > 32 {
                return c.err("bitfield range");
            }
            let last = if name == "bfi" { lsb + width - 1 } else { width - 1 };
            let base = match name {
                "ubfx" => 0xf3c0,
                "sbfx" => 0xf340,
                _ => 0xf360,
            };
            (
                vec![base | rnn as u16, ((lsb >> 2) << 12) | ((rd as u16) << 8) | ((lsb & 3) << 6) | last],
                format!("{}, {}, #{lsb}, #{width}", rn(rd), rn(rnn)),
            )
        }
        "clz" => {
            let (rd, rm) = (c.reg(0)?, c.reg(1)?);
            (vec![0xfab0 | rm as u16, 0xf080 | ((rd as u16) << 8) | rm as u16], format!("{}, {}", rn(rd), rn(rm)))
        }
        "sxth" | "sxtb" | "uxth" | "uxtb" => {
            let (rd, rm) = (c.reg(0)?, c.reg(1)?);
            let text = format!("{}, {}", rn(rd), rn(rm));
            if insn.wide {
                let hw1 = match name {
                    "sxth" => 0xfa0f,
                    "uxth" => 0xfa1f,
                    "sxtb" => 0xfa4f,
                    _ => 0xfa5f,
                };
                (vec![hw1, 0xf080 | ((rd as u16) << 8) | rm as u16], text)
            } else {
                let op = ["sxth", "sxtb", "uxth", "uxtb"].iter().position(|x| *x == name).unwrap() as u16;
                (vec![0xb200 | (op << 6) | ((c.lo(1)? as u16) << 3) | c.lo(0)? as u16], text)
            }
        }
        "rev" | "rev16" | "revsh" => {
            let (rd, rm) = (c.lo(0)?, c.lo(1)?);
            let op = match name {
                "rev" => 0,
                "rev16" => 1,
                _ => 3,
            };
            (vec![0xba00 | (op << 6) | ((rm as u16) << 3) | rd as u16], format!("{}, {}", rn(rd), rn(rm)))
        }
        _ => encode_dp(&c, name, s)?,
    };
    let text = if ops_text.is_empty() { mnem } else { format!("{mnem} {ops_text}") };
    Ok((hws, text))
}

fn encode_ldst(c: &Ctx, name: &str, pc_al: u32) -> Result<(Vec<u16>, String), AsmError> {
    let insn = c.insn;
    let rt = c.reg(0)?;
    let rts = reg_name(rt);
    // Literal via label.
    if let Some(Opnd::Target(e)) = c.ops().get(1) {
        let t = e.eval(c.labels, c.addr)? as u32;
        let off = t as i64 - pc_al as i64;
        return encode_literal(c, name, rt, off);
    }
    let Some(Opnd::Mem { base, off, wb }) = c.ops().get(1) else {
        return c.err("expected memory operand");
    };
    let base = *base;
    let post = match c.ops().get(2) {
        Some(Opnd::Imm(e)) => Some(e.eval(c.labels, c.addr)?),
        None => None,
        _ => return c.err("bad post-index operand"),
    };
    let imm = match off {
        MemOff::Imm(e) => Some(e.eval(c.labels, c.addr)?),
        MemOff::None => Some(0),
        MemOff::Reg(..) => None,
    };
    if base == 15 && post.is_none() && !wb {
        if let Some(v) = imm {
            return encode_literal(c, name, rt, v);
        }
    }
    if !insn.wide {
        if *wb || post.is_some() {
            return c.err("narrow load/store has no writeback");
        }
        match off {
            MemOff::Reg(rm, 0) => {
                let op = match name {
                    "str" => 0,
                    "strh" => 1,
                    "strb" => 2,
                    "ldrsb" => 3,
                    "ldr" => 4,
                    "ldrh" => 5,
                    "ldrb" => 6,
                    _ => 7,
                };
                if rt > 7 || base > 7 || *rm > 7 {
                    return c.err("low registers required");
                }
                let text = format!("{rts}, [{}, {}]", reg_name(base), reg_name(*rm));
                return Ok((vec![0x5000 | (op << 9) | ((*rm as u16) << 6) | ((base as u16) << 3) | rt as u16], text));
            }
            MemOff::Reg(..) => return c.err("narrow register offset has no shift"),
            _ => {}
        }
        let v = imm.unwrap();
        let text = format!("{rts}, [{}, #{v}]", reg_name(base));
        if base == 13 && (name == "ldr" || name == "str") {
            if v < 0 || v > 1020 || v % 4 != 0 || rt > 7 {
                return c.err("sp-relative offset");
            }
            let op = if name == "ldr" { 0x9800 } else { 0x9000 };
            return Ok((vec![op | ((rt as u16) << 8) | (v / 4) as u16], text));
        }
        let (op, scale) = match name {
            "str" => (0x6000, 4),
            "ldr" => (0x6800, 4),
            "strb" => (0x7000, 1),
            "ldrb" => (0x7800, 1),
            "strh" => (0x8000, 2),
            "ldrh" => (0x8800, 2),
            _ => return c.err("no immediate form for signed narrow loads"),
        };
        if rt > 7 || base > 7 || v < 0 || v % scale != 0 || v / scale > 31 {
            return c.err("narrow immediate offset");
        }
        return Ok((vec![op | (((v / scale) as u16) << 6) | ((base as u16) << 3) | rt as u16], text));
    }
    let (imm12op, imm8op) = match name {
        "ldr" => (0xf8d0, 0xf850),
        "str" => (0xf8c0, 0xf840),
        "ldrb" => (0xf890, 0xf810),
        "strb" => (0xf880, 0xf800),
        "ldrh" => (0xf8b0, 0xf830),
        "strh" => (0xf8a0, 0xf820),
        "ldrsb" => (0xf990, 0xf910),
        _ => (0xf9b0, 0xf930),
    };
    let rtb = (rt as u16) << 12;
    let bs = reg_name(base);
    if let MemOff::Reg(rm, sh) = off {
        if *sh > 3 {
            return c.err("shift 0..3");
        }
        let text = if *sh == 0 {
            format!("{rts}, [{bs}, {}]", reg_name(*rm))
        } else {
            format!("{rts}, [{bs}, {}, lsl #{sh}]", reg_name(*rm))
        };
        return Ok((vec![imm8op | base as u16, rtb | ((*sh as u16) << 4) | *rm as u16], text));
    }
    if let Some(p) = post {
        if p.abs() > 255 {
            return c.err("post-index range");
        }
        let u = (p >= 0) as u16;
        return Ok((
            vec![imm8op | base as u16, rtb | 0x800 | (u << 9) | (1 << 8) | p.unsigned_abs() as u16],
            format!("{rts}, [{bs}], #{p}"),
        ));
    }
    let v = imm.unwrap();
    if *wb {
        if v.abs() > 255 {
            return c.err("pre-index range");
        }
        let u = (v >= 0) as u16;
        return Ok((
            vec![imm8op | base as u16, rtb | 0x800 | (1 << 10) | (u << 9) | (1 << 8) | v.unsigned_abs() as u16],
            format!("{rts}, [{bs}, #{v}]!"),
        ));
    }
    if v >= 0 {
        if v > 4095 {
            return c.err("imm12 range");
        }
        Ok((vec![imm12op | base as u16, rtb | v as u16], format!("{rts}, [{bs}, #{v}]")))
    } else {
        if v < -255 {
            return c.err("negative offset range");
        }
        Ok((vec![imm8op | base as u16, rtb | 0x800 | (1 << 10) | (-v) as u16], format!("{rts}, [{bs}, #{v}]")))
    }
}

fn encode_literal(c: &Ctx, name: &str, rt: u8, off: i64) -> Result<(Vec<u16>, String), AsmError> {
    let text = format!("{}, [pc, #{off}]", reg_name(rt));
    if !c.insn.wide {
        if name != "ldr" || rt > 7 || !(0..=1020).contains(&off) || off % 4 != 0 {
            return c.err("narrow literal load constraints");
        }
        return Ok((vec![0x4800 | ((rt as u16) << 8) | (off / 4) as u16], text));
    }
    if off.abs() > 4095 {
        return c.err("literal range");
    }
    let base = match name {
        "ldr" => 0xf85f,
        "ldrb" => 0xf81f,
        "ldrh" => 0xf83f,
        "ldrsb" => 0xf91f,
        "ldrsh" => 0xf93f,
        _ => return c.err("no literal store"),
    };
    let u = ((off >= 0) as u16) << 7;
    Ok((vec![base | u, ((rt as u16) << 12) | off.unsigned_abs() as u16], text))
}

/// Data-processing instructions (narrow and wide).
fn encode_dp(c: &Ctx, name: &str, s: u16) -> Result<(Vec<u16>, String), AsmError> {
    let insn = c.insn;
    let rn = reg_name;
    let n = c.n();
    if insn.width == 2 {
        // Narrow forms.
        match name {
            "lsl" | "lsr" | "asr" if n == 3 && c.is_imm(2) => {
                c.want_narrow_flags()?;
                let (rd, rm, v) = (c.lo(0)?, c.lo(1)?, c.imm(2)?);
                let (op, imm5) = match name {
                    "lsl" if (0..=31).contains(&v) => (0, v),
                    "lsr" if (1..=32).contains(&v) => (1, v & 31),
                    "asr" if (1..=32).contains(&v) => (2, v & 31),
                    _ => return c.err("shift amount"),
                };
                return Ok((vec![(op << 11) | ((imm5 as u16) << 6) | ((rm as u16) << 3) | rd as u16], format!("{}, {}, #{v}", rn(rd), rn(rm))));
            }
            "add" | "sub" => {
                if n == 3 && c.is_reg(2) && c.reg(1)? != 13 {
                    c.want_narrow_flags()?;
                    let (rd, rnn, rm) = (c.lo(0)?, c.lo(1)?, c.lo(2)?);
                    let op = if name == "add" { 0x1800 } else { 0x1a00 };
                    return Ok((vec![op | ((rm as u16) << 6) | ((rnn as u16) << 3) | rd as u16], format!("{}, {}, {}", rn(rd), rn(rnn), rn(rm))));
                }
                if n == 3 && c.is_imm(2) && c.reg(1)? == 13 && name == "add" {
                    c.want_no_flags()?;
                    let rd = c.lo(0)?;
                    let v = c.imm(2)?;
                    if !(0..=1020).contains(&v) || v % 4 != 0 {
                        return c.err("add rd, sp, #imm range");
                    }
                    return Ok((vec![0xa800 | ((rd as u16) << 8) | (v / 4) as u16], format!("{}, sp, #{v}", rn(rd))));
                }
                if n == 3 && c.is_imm(2) {
                    c.want_narrow_flags()?;
                    let (rd, rnn, v) = (c.lo(0)?, c.lo(1)?, c.imm(2)?);
                    if !(0..=7).contains(&v) {
                        return c.err("imm3 range");
                    }
                    let op = if name == "add" { 0x1c00 } else { 0x1e00 };
                    return Ok((vec![op | ((v as u16) << 6) | ((rnn as u16) << 3) | rd as u16], format!("{}, {}, #{v}", rn(rd), rn(rnn))));
                }
                if n == 2 && c.is_imm(1) && c.reg(0)? == 13 {
                    c.want_no_flags()?;
                    let v = c.imm(1)?;
                    if !(0..=508).contains(&v) || v % 4 != 0 {
                        return c.err("sp adjust range");
                    }
                    let op = if name == "add" { 0xb000 } else { 0xb080 };
                    return Ok((vec![op | (v / 4) as u16], format!("sp, #{v}")));
                }
                if n == 2 && c.is_imm(1) {
                    c.want_narrow_flags()?;
                    let (rd, v) = (c.lo(0)?, c.imm(1)?);
                    if !(0..=255).contains(&v) {
                        return c.err("imm8 range");
                    }
                    let op = if name == "add" { 0x3000 } else { 0x3800 };
                    return Ok((vec![op | ((rd as u16) << 8) | v as u16], format!("{}, #{v}", rn(rd))));
                }
                if n == 2 && name == "add" {
                    c.want_no_flags()?;
                    let (rd, rm) = (c.reg(0)?, c.reg(1)?);
                    return Ok((vec![0x4400 | (((rd >> 3) as u16) << 7) | ((rm as u16) << 3) | (rd & 7) as u16], format!("{}, {}", rn(rd), rn(rm))));
                }
                return c.err("unsupported add/sub form");
            }
            "mov" => {
                if c.is_imm(1) {
                    c.want_narrow_flags()?;
                    let (rd, v) = (c.lo(0)?, c.imm(1)?);
                    if !(0..=255).contains(&v) {
                        return c.err("imm8 range");
                    }
                    return Ok((vec![0x2000 | ((rd as u16) << 8) | v as u16], format!("{}, #{v}", rn(rd))));
                }
                let (rd, rm) = (c.reg(0)?, c.reg(1)?);
                if insn.setflags {
                    return Ok((vec![((c.lo(1)? as u16) << 3) | c.lo(0)? as u16], format!("{}, {}", rn(rd), rn(rm))));
                }
                return Ok((vec![0x4600 | (((rd >> 3) as u16) << 7) | ((rm as u16) << 3) | (rd & 7) as u16], format!("{}, {}", rn(rd), rn(rm))));
            }
            "cmp" => {
                if c.is_imm(1) {
                    let (r, v) = (c.lo(0)?, c.imm(1)?);
                    if !(0..=255).contains(&v) {
                        return c.err("imm8 range");
                    }
                    return Ok((vec![0x2800 | ((r as u16) << 8) | v as u16], format!("{}, #{v}", rn(r))));
                }
                let (a, b) = (c.reg(0)?, c.reg(1)?);
                let text = format!("{}, {}", rn(a), rn(b));
                if a < 8 && b < 8 {
                    return Ok((vec![0x4280 | ((b as u16) << 3) | a as u16], text));
                }
                return Ok((vec![0x4500 | (((a >> 3) as u16) << 7) | ((b as u16) << 3) | (a & 7) as u16], text));
            }
            "rsb" => {
                c.want_narrow_flags()?;
                let (rd, rnn) = (c.lo(0)?, c.lo(1)?);
                if c.imm(2)? != 0 {
                    return c.err("narrow rsb only with #0");
                }
                return Ok((vec![0x4240 | ((rnn as u16) << 3) | rd as u16], format!("{}, {}, #0", rn(rd), rn(rnn))));
            }
            _ => {}
        }
        let op = match name {
            "and" => 0,
            "eor" => 1,
            "lsl" => 2,
            "lsr" => 3,
            "asr" => 4,
            "adc" => 5,
            "sbc" => 6,
            "ror" => 7,
            "tst" => 8,
            "cmn" => 11,
            "orr" => 12,
            "bic" => 14,
            "mvn" => 15,
            _ => return c.err(format!("no narrow form for `{name}`")),
        };
        if !matches!(name, "tst" | "cmn") {
            c.want_narrow_flags()?;
        }
        if n != 2 {
            return c.err("narrow data-processing takes two registers");
        }
        let (rdn, rm) = (c.lo(0)?, c.lo(1)?);
        return Ok((vec![0x4000 | (op << 6) | ((rm as u16) << 3) | rdn as u16], format!("{}, {}", rn(rdn), rn(rm))));
    }

    // Wide forms.
    if matches!(name, "lsl" | "lsr" | "asr" | "ror") {
        let ty = ShiftKind::parse(name).unwrap().bits();
        let (rd, rm) = (c.reg(0)?, c.reg(1)?);
        if c.is_imm(2) {
            let v = c.imm(2)? as u16;
            let enc = if v == 32 { 0 } else { v };
            return Ok((
                vec![0xea4f | (s << 4), ((enc >> 2) << 12) | ((rd as u16) << 8) | ((enc & 3) << 6) | (ty << 4) | rm as u16],
                format!("{}, {}, #{v}", rn(rd), rn(rm)),
            ));
        }
        let rs = c.reg(2)?;
        return Ok((vec![0xfa00 | (ty << 5) | (s << 4) | rm as u16, 0xf000 | ((rd as u16) << 8) | rs as u16], format!("{}, {}, {}", rn(rd), rn(rm), rn(rs))));
    }
    let Some(op) = dp_wide_op(name) else {
        return c.err(format!("unknown wide instruction `{name}`"));
    };
    let compare = matches!(name, "tst" | "teq" | "cmn" | "cmp");
    let unary = matches!(name, "mov" | "mvn");
    let (rd, rnn, src_idx) = if compare {
        (15u8, c.reg(0)?, 1)
    } else if unary {
        (c.reg(0)?, 15u8, 1)
    } else {
        (c.reg(0)?, c.reg(1)?, 2)
    };
    let s = if compare { 1 } else { s };
    let mut parts: Vec<String> = Vec::new();
    if !compare {
        parts.push(rn(rd));
    }
    if !unary {
        parts.push(rn(rnn));
    }
    if c.is_imm(src_idx) {
        let v = c.imm(src_idx)? as u32;
        let imm12 = thumb_expand_encode(v).ok_or_else(|| AsmError::Line(insn.line, format!("#{v} not a modified immediate")))?;
        let (i, lo) = split_imm12(imm12);
        parts.push(format!("#{v}"));
        return Ok((vec![0xf000 | i | (op << 5) | (s << 4) | rnn as u16, lo | ((rd as u16) << 8)], parts.join(", ")));
    }
    let rm = c.reg(src_idx)?;
    let (kind, amt) = c.shift(src_idx + 1)?;
    parts.push(rn(rm));
    if amt != 0 {
        parts.push(format!("{} #{amt}", kind.name()));
    }
    let enc = if amt == 32 { 0 } else { amt as u16 };
    Ok((
        vec![0xea00 | (op << 5) | (s << 4) | rnn as u16, ((enc >> 2) << 12) | ((rd as u16) << 8) | ((enc & 3) << 6) | (kind.bits() << 4) | rm as u16],
        parts.join(", "),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(src: &str, addr: u32) -> (Vec<u8>, String) {
        let p = assemble(addr, src).unwrap();
        (p.bytes.clone(), p.listing[0].text.clone())
    }

    #[test]
    fn figure_one_encodings() {
        // Halfwords as printed by a reference disassembler.
        let (b, t) = one("movs r0, #34", 0x1eac0);
        assert_eq!(b, 0x2022u16.to_le_bytes());
        assert_eq!(t, "movs r0, #34");
        let (b, t) = one("ldr r2, [pc, #736]", 0x1eaba);
        assert_eq!(b, 0x4ab8u16.to_le_bytes());
        assert_eq!(t, "ldr r2, [pc, #736]");
        let (b, _) = one("add r3, sp, #24", 0);
        assert_eq!(b, 0xab06u16.to_le_bytes());
        let (b, _) = one("ldrh r1, [r2, #4]", 0);
        assert_eq!(b, 0x8891u16.to_le_bytes());
        let (b, _) = one("strb r2, [r3, #6]", 0);
        assert_eq!(b, 0x719au16.to_le_bytes());
        // bl 1e748 at 1ead0 encodes as f7ff fe3a
        let (b, _) = one(".org 0x1ead0\nbl 0x1e748", 0);
        assert_eq!(&b[0x1ead0..], &[0xff, 0xf7, 0x3a, 0xfe]);
    }

    #[test]
    fn it_mask_encoding() {
        let p = assemble(0, "ite eq\nmoveq r0, #1\nmovne r0, #2").unwrap();
        assert_eq!(&p.bytes[..2], &0xbf0cu16.to_le_bytes());
        assert_eq!(p.listing[1].text, "moveq r0, #1");
        assert_eq!(p.listing[2].text, "movne r0, #2");
    }

    #[test]
    fn modified_immediates() {
        assert_eq!(thumb_expand_encode(0x00ab00ab), Some(0x1ab));
        assert_eq!(thumb_expand_encode(0xab00ab00), Some(0x2ab));
        assert_eq!(thumb_expand_encode(0xabababab), Some(0x3ab));
        // 0x80000000 = ROR(0x80, 8)
        assert_eq!(thumb_expand_encode(0x8000_0000), Some(0x400));
        assert_eq!(thumb_expand_encode(0x101), None);
    }

    #[test]
    fn byte_kinds_and_labels() {
        let p = assemble(0x100, ".fn\nf: bx lr\n.balign 4\nlit: .word 7\n").unwrap();
        assert_eq!(p.functions, vec![("f".to_string(), 0x100)]);
        assert_eq!(p.kinds, vec![ByteKind::Code, ByteKind::Code, ByteKind::Padding, ByteKind::Padding, ByteKind::Data, ByteKind::Data, ByteKind::Data, ByteKind::Data]);
        assert_eq!(p.data_ranges(), vec![(0x104, 0x108)]);
    }

    #[test]
    fn bad_sources_rejected() {
        assert!(assemble(0, "add r0, r1, r2").is_err());
        assert!(assemble(0, "b nowhere").is_err());
        assert!(assemble(0, "frob r0").is_err());
    }
}
