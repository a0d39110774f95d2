//! Thumb / Thumb-2 instruction model.

mod decode;

use std::fmt;

use smallvec::SmallVec;

pub use decode::{decode, decode_halfwords, ItState};

pub const SP: u8 = 13;
pub const LR: u8 = 14;
pub const PC: u8 = 15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Cond(pub u8);

impl Cond {
    pub const EQ: Cond = Cond(0);
    pub const NE: Cond = Cond(1);
    pub const CS: Cond = Cond(2);
    pub const CC: Cond = Cond(3);
    pub const HI: Cond = Cond(8);
    pub const LS: Cond = Cond(9);
    pub const AL: Cond = Cond(14);

    pub fn name(self) -> &'static str {
        [
            "eq", "ne", "cs", "cc", "mi", "pl", "vs", "vc", "hi", "ls", "ge", "lt", "gt", "le", "",
            "",
        ][self.0 as usize & 15]
    }

    pub fn invert(self) -> Cond {
        Cond(self.0 ^ 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Op {
    Lsl,
    Lsr,
    Asr,
    Ror,
    Mov,
    Mvn,
    Add,
    Adc,
    Sub,
    Sbc,
    Rsb,
    Cmp,
    Cmn,
    Tst,
    Teq,
    And,
    Orr,
    Eor,
    Bic,
    Mul,
    Mla,
    Mls,
    Udiv,
    Sdiv,
    Ldr,
    Ldrb,
    Ldrh,
    Ldrsb,
    Ldrsh,
    Str,
    Strb,
    Strh,
    Ldrd,
    Strd,
    Ldm,
    Stm,
    Stmdb,
    Push,
    Pop,
    B,
    Bl,
    Bx,
    Blx,
    Cbz,
    Cbnz,
    Tbb,
    Tbh,
    Svc,
    Bkpt,
    Udf,
    Nop,
    Yield,
    Wfe,
    Wfi,
    Sev,
    It,
    Adr,
    Sxtb,
    Sxth,
    Uxtb,
    Uxth,
    Rev,
    Rev16,
    Revsh,
    Cpsie,
    Cpsid,
    Msr,
    Mrs,
    Dsb,
    Dmb,
    Isb,
    Movw,
    Movt,
    Addw,
    Subw,
    Ubfx,
    Sbfx,
    Bfi,
    Clz,
    /// A 16-bit halfword that is not a valid instruction.
    Unknown,
    /// A 32-bit encoding outside the supported subset.
    Unsupported,
}

impl Op {
    pub fn name(self) -> &'static str {
        use Op::*;
        match self {
            Lsl => "lsl",
            Lsr => "lsr",
            Asr => "asr",
            Ror => "ror",
            Mov => "mov",
            Mvn => "mvn",
            Add => "add",
            Adc => "adc",
            Sub => "sub",
            Sbc => "sbc",
            Rsb => "rsb",
            Cmp => "cmp",
            Cmn => "cmn",
            Tst => "tst",
            Teq => "teq",
            And => "and",
            Orr => "orr",
            Eor => "eor",
            Bic => "bic",
            Mul => "mul",
            Mla => "mla",
            Mls => "mls",
            Udiv => "udiv",
            Sdiv => "sdiv",
            Ldr => "ldr",
            Ldrb => "ldrb",
            Ldrh => "ldrh",
            Ldrsb => "ldrsb",
            Ldrsh => "ldrsh",
            Str => "str",
            Strb => "strb",
            Strh => "strh",
            Ldrd => "ldrd",
            Strd => "strd",
            Ldm => "ldm",
            Stm => "stm",
            Stmdb => "stmdb",
            Push => "push",
            Pop => "pop",
            B => "b",
            Bl => "bl",
            Bx => "bx",
            Blx => "blx",
            Cbz => "cbz",
            Cbnz => "cbnz",
            Tbb => "tbb",
            Tbh => "tbh",
            Svc => "svc",
            Bkpt => "bkpt",
            Udf => "udf",
            Nop => "nop",
            Yield => "yield",
            Wfe => "wfe",
            Wfi => "wfi",
            Sev => "sev",
            It => "it",
            Adr => "adr",
            Sxtb => "sxtb",
            Sxth => "sxth",
            Uxtb => "uxtb",
            Uxth => "uxth",
            Rev => "rev",
            Rev16 => "rev16",
            Revsh => "revsh",
            Cpsie => "cpsie",
            Cpsid => "cpsid",
            Msr => "msr",
            Mrs => "mrs",
            Dsb => "dsb",
            Dmb => "dmb",
            Isb => "isb",
            Movw => "movw",
            Movt => "movt",
            Addw => "addw",
            Subw => "subw",
            Ubfx => "ubfx",
            Sbfx => "sbfx",
            Bfi => "bfi",
            Clz => "clz",
            Unknown => ".hword",
            Unsupported => ".inst.w",
        }
    }

    /// Whether a 32-bit encoding of this mnemonic is printed with `.w`.
    fn has_narrow_form(self) -> bool {
        use Op::*;
        matches!(
            self,
            B | Ldr | Str | Ldrb | Strb | Ldrh | Strh | Ldrsb | Ldrsh | Mov | Mvn | Add | Sub | Adc
                | Sbc | Rsb | Cmp | Cmn | Tst | And | Orr | Eor | Bic | Lsl | Lsr | Asr | Ror
                | Ldm | Stm | Sxtb | Sxth | Uxtb | Uxth | Mul
        )
    }

    pub fn is_load(self) -> bool {
        matches!(self, Op::Ldr | Op::Ldrb | Op::Ldrh | Op::Ldrsb | Op::Ldrsh | Op::Ldrd)
    }

    pub fn is_store(self) -> bool {
        matches!(self, Op::Str | Op::Strb | Op::Strh | Op::Strd)
    }

    /// Access size in bytes of single loads and stores.
    pub fn access_size(self) -> Option<u32> {
        Some(match self {
            Op::Ldr | Op::Str => 4,
            Op::Ldrh | Op::Ldrsh | Op::Strh => 2,
            Op::Ldrb | Op::Ldrsb | Op::Strb => 1,
            Op::Ldrd | Op::Strd => 8,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ShiftKind {
    Lsl,
    Lsr,
    Asr,
    Ror,
}

impl ShiftKind {
    pub fn from_bits(b: u32) -> ShiftKind {
        [ShiftKind::Lsl, ShiftKind::Lsr, ShiftKind::Asr, ShiftKind::Ror][b as usize & 3]
    }
    fn name(self) -> &'static str {
        match self {
            ShiftKind::Lsl => "lsl",
            ShiftKind::Lsr => "lsr",
            ShiftKind::Asr => "asr",
            ShiftKind::Ror => "ror",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AddrMode {
    Offset,
    PreIndex,
    PostIndex,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Mem {
    pub base: u8,
    /// Index register and left-shift amount.
    pub index: Option<(u8, u8)>,
    pub offset: i32,
    pub mode: AddrMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Operand {
    Reg(u8),
    /// Base register with writeback, printed `rN!`.
    RegWb(u8),
    Imm(i64),
    List(u16),
    Mem(Mem),
    Target(u32),
    Shift(ShiftKind, u8),
    /// Symbolic operand (system register, barrier option, CPS flags).
    Sym(&'static str),
}

impl fmt::Display for Operand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Operand::Reg(r) => f.write_str(reg_name(r)),
            Operand::RegWb(r) => write!(f, "{}!", reg_name(r)),
            Operand::Imm(v) => write!(f, "#{v}"),
            Operand::List(mask) => {
                f.write_str("{")?;
                let mut first = true;
                for r in (0..16).filter(|r| mask & (1 << r) != 0) {
                    if !first {
                        f.write_str(", ")?;
                    }
                    first = false;
                    f.write_str(reg_name(r))?;
                }
                f.write_str("}")
            }
            Operand::Mem(m) => {
                let base = reg_name(m.base);
                match (m.index, m.mode) {
                    (Some((rm, 0)), _) => write!(f, "[{base}, {}]", reg_name(rm)),
                    (Some((rm, sh)), _) => write!(f, "[{base}, {}, lsl #{sh}]", reg_name(rm)),
                    (None, AddrMode::Offset) => write!(f, "[{base}, #{}]", m.offset),
                    (None, AddrMode::PreIndex) => write!(f, "[{base}, #{}]!", m.offset),
                    (None, AddrMode::PostIndex) => write!(f, "[{base}], #{}", m.offset),
                }
            }
            Operand::Target(t) => write!(f, "0x{t:x}"),
            Operand::Shift(k, n) => write!(f, "{} #{n}", k.name()),
            Operand::Sym(s) => f.write_str(s),
        }
    }
}

pub fn reg_name(r: u8) -> &'static str {
    [
        "r0", "r1", "r2", "r3", "r4", "r5", "r6", "r7", "r8", "r9", "r10", "r11", "r12", "sp", "lr",
        "pc",
    ][r as usize & 15]
}

/// One decoded instruction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instruction {
    pub address: u32,
    pub width: u8,
    pub op: Op,
    pub setflags: bool,
    /// Condition from a conditional branch encoding or an enclosing IT block.
    pub cond: Option<Cond>,
    pub in_it: bool,
    pub operands: SmallVec<[Operand; 4]>,
    /// Raw encoding: `hw1 << 16 | hw2` for 32-bit instructions.
    pub raw: u32,
    /// Modified-immediate encodings that rotate set C to bit 31 of the constant.
    pub imm_carry: bool,
}

impl Instruction {
    pub fn end(&self) -> u32 {
        self.address + self.width as u32
    }

    pub fn reg(&self, i: usize) -> Option<u8> {
        match self.operands.get(i) {
            Some(Operand::Reg(r)) | Some(Operand::RegWb(r)) => Some(*r),
            _ => None,
        }
    }

    pub fn imm(&self, i: usize) -> Option<i64> {
        match self.operands.get(i) {
            Some(Operand::Imm(v)) => Some(*v),
            _ => None,
        }
    }

    pub fn mem(&self) -> Option<Mem> {
        self.operands.iter().find_map(|o| match o {
            Operand::Mem(m) => Some(*m),
            _ => None,
        })
    }

    pub fn reg_list(&self) -> Option<u16> {
        self.operands.iter().find_map(|o| match o {
            Operand::List(m) => Some(*m),
            _ => None,
        })
    }

    /// Direct branch target for `b`, `bl`, `cbz` and `cbnz`.
    pub fn target(&self) -> Option<u32> {
        self.operands.iter().find_map(|o| match o {
            Operand::Target(t) if self.op != Op::Adr => Some(*t),
            _ => None,
        })
    }

    pub fn is_conditional(&self) -> bool {
        self.cond.is_some_and(|c| c != Cond::AL)
    }

    pub fn is_invalid(&self) -> bool {
        matches!(self.op, Op::Unknown | Op::Unsupported)
    }

    /// Address and size of a PC-relative literal load.
    pub fn literal(&self) -> Option<(u32, u32)> {
        if !self.op.is_load() || self.op == Op::Ldrd {
            return None;
        }
        let m = self.mem()?;
        if m.base != PC || m.index.is_some() || m.mode != AddrMode::Offset {
            return None;
        }
        let pc = (self.address + 4) & !3;
        Some((pc.wrapping_add(m.offset as u32), self.op.access_size()?))
    }

    /// Whether the instruction may write the program counter.
    pub fn writes_pc(&self) -> bool {
        match self.op {
            Op::B | Op::Bx | Op::Cbz | Op::Cbnz | Op::Tbb | Op::Tbh => true,
            Op::Pop | Op::Ldm => self.reg_list().is_some_and(|l| l & (1 << PC) != 0),
            Op::Mov | Op::Add | Op::Ldr => self.reg(0) == Some(PC),
            _ => false,
        }
    }

    /// Function return: `bx lr`, `pop {.., pc}`, `ldm sp!, {.., pc}`, `mov pc, lr`.
    pub fn is_return(&self) -> bool {
        match self.op {
            Op::Bx => self.reg(0) == Some(LR),
            Op::Pop => self.reg_list().is_some_and(|l| l & (1 << PC) != 0),
            Op::Ldm => self.reg(0) == Some(SP) && self.reg_list().is_some_and(|l| l & (1 << PC) != 0),
            Op::Mov => self.reg(0) == Some(PC) && self.reg(1) == Some(LR),
            Op::Ldr => self.reg(0) == Some(PC) && self.mem().is_some_and(|m| m.base == SP),
            _ => false,
        }
    }

    pub fn is_nop_like(&self) -> bool {
        match self.op {
            Op::Nop => true,
            Op::Mov => !self.setflags && self.reg(0).is_some() && self.reg(0) == self.reg(1),
            _ => false,
        }
    }

    /// `push`, `sub sp, #n` or `stmdb sp!, {..}`.
    pub fn is_prologue(&self) -> bool {
        match self.op {
            Op::Push => true,
            Op::Sub | Op::Subw => self.reg(0) == Some(SP),
            Op::Stmdb => matches!(self.operands.first(), Some(Operand::RegWb(SP))),
            _ => false,
        }
    }

    pub fn mnemonic(&self) -> String {
        let mut s = String::from(self.op.name());
        if self.op == Op::It {
            return s;
        }
        if self.setflags {
            s.push('s');
        }
        if let Some(c) = self.cond {
            s.push_str(c.name());
        }
        if self.width == 4 && self.op.has_narrow_form() {
            s.push_str(".w");
        }
        s
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.op {
            Op::Unknown => return write!(f, ".hword 0x{:04x}", self.raw),
            Op::Unsupported => return write!(f, ".inst.w 0x{:08x}", self.raw),
            Op::It => {
                let first = self.cond.unwrap_or(Cond::AL);
                let mask = self.raw & 0xf;
                let n = 4 - mask.trailing_zeros();
                let mut pat = String::new();
                for k in 1..n {
                    let bit = (mask >> (4 - k)) & 1;
                    pat.push(if bit == (first.0 as u32 & 1) { 't' } else { 'e' });
                }
                return write!(f, "it{pat} {}", first.name());
            }
            _ => {}
        }
        f.write_str(&self.mnemonic())?;
        for (i, o) in self.operands.iter().enumerate() {
            f.write_str(if i == 0 { " " } else { ", " })?;
            write!(f, "{o}")?;
        }
        Ok(())
    }
}

/// Linear Thumb sweep over `bytes` loaded at `base`, tracking IT blocks.
pub fn sweep(bytes: &[u8], base: u32) -> Vec<Instruction> {
    let mut out = Vec::new();
    let mut off = 0usize;
    let mut it = ItState::default();
    while off + 1 < bytes.len() {
        let insn = decode(&bytes[off..], base + off as u32, it);
        it = if insn.op == Op::It { ItState::from_it(&insn) } else { it.advance() };
        off += insn.width as usize;
        out.push(insn);
    }
    out
}
