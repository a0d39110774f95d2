//! Concrete micro-execution over partially known machine state.
//!
//! Registers, flags and memory bytes are each either known or unknown.
//! Operations on unknown inputs produce unknown outputs; conditions that
//! depend on unknown flags are reported to the caller rather than guessed.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use crate::image::FirmwareImage;
use crate::isa::{decode, AddrMode, Cond, Instruction, ItState, Op, Operand, ShiftKind, LR, PC, SP};
use crate::listing::Listing;

pub const STACK_BOTTOM: u32 = 0x2fff_0000;
pub const STACK_TOP: u32 = 0x3000_0000;

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum ExecError {
    #[error("unsupported instruction at 0x{address:x}: {text}")]
    Unsupported { address: u32, text: String },
    #[error("instruction budget of {0} exhausted")]
    Budget(u64),
    #[error("wall-clock limit reached")]
    Timeout,
    #[error("no instruction at 0x{0:x}")]
    NoCode(u32),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct Flags {
    pub n: Option<bool>,
    pub z: Option<bool>,
    pub c: Option<bool>,
    pub v: Option<bool>,
}

impl Flags {
    pub fn known(n: bool, z: bool, c: bool, v: bool) -> Flags {
        Flags { n: Some(n), z: Some(z), c: Some(c), v: Some(v) }
    }

    /// Three-valued evaluation of a condition code.
    pub fn eval(&self, cond: Cond) -> Option<bool> {
        let Flags { n, z, c, v } = *self;
        let base = match cond.0 >> 1 {
            0 => z,
            1 => c,
            2 => n,
            3 => v,
            4 => match (c, z) {
                (Some(false), _) | (_, Some(true)) => Some(false),
                (Some(true), Some(false)) => Some(true),
                _ => None,
            },
            5 => n.zip(v).map(|(n, v)| n == v),
            6 => match (z, n.zip(v)) {
                (Some(true), _) => Some(false),
                (Some(false), Some((n, v))) => Some(n == v),
                _ => None,
            },
            _ => return Some(true),
        };
        if cond.0 & 1 == 1 {
            base.map(|b| !b)
        } else {
            base
        }
    }
}

/// Sparse byte memory; `None` records a byte known to hold an unknown value.
pub type Overlay = BTreeMap<u32, Option<u8>>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MachineState {
    pub regs: [Option<u32>; 16],
    pub flags: Flags,
    pub mem: Overlay,
    /// Set when sp leaves the synthetic stack region.
    pub sp_escaped: bool,
    /// Stores whose address was unknown.
    pub wild_stores: u32,
}

impl Default for MachineState {
    fn default() -> Self {
        Self::new()
    }
}

impl MachineState {
    pub fn new() -> MachineState {
        let mut regs = [None; 16];
        regs[SP as usize] = Some(STACK_TOP);
        MachineState { regs, flags: Flags::default(), mem: Overlay::new(), sp_escaped: false, wild_stores: 0 }
    }

    pub fn reg(&self, r: u8) -> Option<u32> {
        self.regs[r as usize]
    }

    pub fn set_reg(&mut self, r: u8, v: Option<u32>) {
        self.regs[r as usize] = v;
        if r == SP {
            self.sp_escaped |= !v.is_some_and(|sp| (STACK_BOTTOM..=STACK_TOP).contains(&sp));
        }
    }

    pub fn write_bytes(&mut self, addr: u32, bytes: &[u8]) {
        for (i, b) in bytes.iter().enumerate() {
            self.mem.insert(addr.wrapping_add(i as u32), Some(*b));
        }
    }

    pub fn write_unknown(&mut self, addr: u32, len: u32) {
        for i in 0..len {
            self.mem.insert(addr.wrapping_add(i), None);
        }
    }

    fn write(&mut self, addr: Option<u32>, value: Option<u32>, size: u32) {
        let Some(addr) = addr else {
            self.wild_stores += 1;
            return;
        };
        for i in 0..size {
            let b = value.map(|v| (v >> (8 * i)) as u8);
            self.mem.insert(addr.wrapping_add(i), b);
        }
    }
}

/// Read-only context for execution: the image and an optional shared overlay.
#[derive(Clone, Copy)]
pub struct Env<'a> {
    pub img: &'a FirmwareImage,
    pub shared: Option<&'a Overlay>,
}

impl<'a> Env<'a> {
    pub fn new(img: &'a FirmwareImage) -> Env<'a> {
        Env { img, shared: None }
    }

    pub fn read_u8(&self, st: &MachineState, addr: u32) -> Option<u8> {
        if let Some(b) = st.mem.get(&addr) {
            return *b;
        }
        if let Some(b) = self.shared.and_then(|s| s.get(&addr)) {
            return *b;
        }
        self.img.read_u8(addr)
    }

    pub fn read(&self, st: &MachineState, addr: u32, size: u32) -> Option<u32> {
        let mut v = 0u32;
        for i in 0..size {
            v |= (self.read_u8(st, addr.wrapping_add(i))? as u32) << (8 * i);
        }
        Some(v)
    }

    pub fn read_bytes(&self, st: &MachineState, addr: u32, len: u32) -> Vec<Option<u8>> {
        (0..len).map(|i| self.read_u8(st, addr.wrapping_add(i))).collect()
    }
}

/// Control-flow effect of one step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flow {
    Next,
    Jump(u32),
    /// Computed or returning transfer; `None` when the target is unknown.
    Indirect(Option<u32>),
    Call { target: Option<u32>, ret: u32 },
    /// The condition depends on unknown state; nothing was executed.
    Indeterminate,
    Svc(u8),
    Trap,
}

fn add_with_carry(x: u32, y: u32, carry: bool) -> (u32, bool, bool) {
    let unsigned = x as u64 + y as u64 + carry as u64;
    let signed = x as i32 as i64 + y as i32 as i64 + carry as i64;
    let r = unsigned as u32;
    (r, r as u64 != unsigned, r as i32 as i64 != signed)
}

/// Shift with carry out. `amount` is the full shift distance.
pub fn shift_c(v: u32, kind: ShiftKind, amount: u32, carry_in: Option<bool>) -> (u32, Option<bool>) {
    if amount == 0 {
        return (v, carry_in);
    }
    let bit = |n: u32| Some((v >> n) & 1 == 1);
    match kind {
        ShiftKind::Lsl => match amount {
            1..=31 => (v << amount, bit(32 - amount)),
            32 => (0, bit(0)),
            _ => (0, Some(false)),
        },
        ShiftKind::Lsr => match amount {
            1..=31 => (v >> amount, bit(amount - 1)),
            32 => (0, bit(31)),
            _ => (0, Some(false)),
        },
        ShiftKind::Asr => match amount {
            1..=31 => (((v as i32) >> amount) as u32, bit(amount - 1)),
            _ => (((v as i32) >> 31) as u32, bit(31)),
        },
        ShiftKind::Ror => {
            let r = v.rotate_right(amount % 32);
            (r, Some(r >> 31 == 1))
        }
    }
}

fn nz(r: u32) -> (Option<bool>, Option<bool>) {
    (Some(r >> 31 == 1), Some(r == 0))
}

/// Second operand value with its shifter carry.
struct Src {
    value: Option<u32>,
    carry: Option<bool>,
}

fn read_reg(st: &MachineState, insn: &Instruction, r: u8) -> Option<u32> {
    if r == PC {
        Some(insn.address + 4)
    } else {
        st.reg(r)
    }
}

fn src_from(st: &MachineState, insn: &Instruction, ops: &[Operand]) -> Src {
    match ops {
        [Operand::Imm(v)] => {
            let v = *v as u32;
            let carry = if insn.imm_carry { Some(v >> 31 == 1) } else { st.flags.c };
            Src { value: Some(v), carry }
        }
        [Operand::Reg(rm)] => Src { value: read_reg(st, insn, *rm), carry: st.flags.c },
        [Operand::Reg(rm), Operand::Shift(k, n)] => match read_reg(st, insn, *rm) {
            Some(v) => {
                let (r, c) = shift_c(v, *k, *n as u32, st.flags.c);
                Src { value: Some(r), carry: c }
            }
            None => Src { value: None, carry: None },
        },
        _ => Src { value: None, carry: None },
    }
}

/// Splits data-processing operands into (destination, first operand, second operand).
fn dp_operands(st: &MachineState, insn: &Instruction) -> Option<(u8, Option<u32>, Src)> {
    let ops = &insn.operands[..];
    match ops {
        [Operand::Reg(rd), Operand::Reg(rn), rest @ ..] if !rest.is_empty() && !matches!(rest[0], Operand::Shift(..)) => {
            Some((*rd, read_reg(st, insn, *rn), src_from(st, insn, rest)))
        }
        [Operand::Reg(rd), rest @ ..] => Some((*rd, read_reg(st, insn, *rd), src_from(st, insn, rest))),
        _ => None,
    }
}

fn mem_address(st: &MachineState, insn: &Instruction) -> (Option<u32>, Option<(u8, Option<u32>)>) {
    let m = insn.mem().expect("memory operand");
    let base = if m.base == PC { Some((insn.address + 4) & !3) } else { st.reg(m.base) };
    let offset = match m.index {
        Some((rm, sh)) => st.reg(rm).map(|v| v << sh),
        None => Some(m.offset as u32),
    };
    let updated = base.zip(offset).map(|(b, o)| b.wrapping_add(o));
    match m.mode {
        AddrMode::Offset => (updated, None),
        AddrMode::PreIndex => (updated, Some((m.base, updated))),
        AddrMode::PostIndex => (base, Some((m.base, updated))),
    }
}

/// Effective address of a load or store, without side effects.
pub fn access_address(st: &MachineState, insn: &Instruction) -> Option<u32> {
    insn.mem()?;
    mem_address(st, insn).0
}

fn ext(v: u32, op: Op) -> u32 {
    match op {
        Op::Sxtb | Op::Ldrsb => v as u8 as i8 as i32 as u32,
        Op::Sxth | Op::Ldrsh => v as u16 as i16 as i32 as u32,
        Op::Uxtb => v & 0xff,
        Op::Uxth => v & 0xffff,
        _ => v,
    }
}

fn unsupported(insn: &Instruction) -> ExecError {
    ExecError::Unsupported { address: insn.address, text: insn.to_string() }
}

/// Whether `insn` executes, given its condition. `force` overrides the flags.
pub fn condition_passes(st: &MachineState, insn: &Instruction, force: Option<bool>) -> Option<bool> {
    match insn.cond {
        Some(c) if c != Cond::AL && insn.op != Op::It => force.or_else(|| st.flags.eval(c)),
        _ => Some(true),
    }
}

/// Executes one instruction.
pub fn step(st: &mut MachineState, insn: &Instruction, env: &Env) -> Result<Flow, ExecError> {
    step_forced(st, insn, env, None)
}

/// Executes one instruction, resolving its condition (or the `cbz`/`cbnz`
/// test) with `force` when given.
pub fn step_forced(st: &mut MachineState, insn: &Instruction, env: &Env, force: Option<bool>) -> Result<Flow, ExecError> {
    if insn.is_invalid() {
        return Err(unsupported(insn));
    }
    match condition_passes(st, insn, force) {
        None => return Ok(Flow::Indeterminate),
        Some(false) => return Ok(Flow::Next),
        Some(true) => {}
    }
    let s = insn.setflags;
    let op = insn.op;
    match op {
        Op::Nop | Op::Yield | Op::Wfe | Op::Wfi | Op::Sev | Op::It | Op::Dsb | Op::Dmb | Op::Isb | Op::Cpsie | Op::Cpsid | Op::Msr => {
            Ok(Flow::Next)
        }
        Op::Mrs => {
            st.set_reg(insn.reg(0).unwrap(), None);
            Ok(Flow::Next)
        }
        Op::Svc => Ok(Flow::Svc(insn.imm(0).unwrap_or(0) as u8)),
        Op::Bkpt | Op::Udf => Ok(Flow::Trap),

        Op::Mov | Op::Mvn => {
            let rd = insn.reg(0).unwrap();
            let src = src_from(st, insn, &insn.operands[1..]);
            let r = if op == Op::Mvn { src.value.map(|v| !v) } else { src.value };
            if s {
                set_logical_flags(st, r, src.carry);
            }
            write_result(st, rd, r)
        }
        Op::Lsl | Op::Lsr | Op::Asr | Op::Ror => {
            let kind = match op {
                Op::Lsl => ShiftKind::Lsl,
                Op::Lsr => ShiftKind::Lsr,
                Op::Asr => ShiftKind::Asr,
                _ => ShiftKind::Ror,
            };
            let rd = insn.reg(0).unwrap();
            let (value, amount) = match &insn.operands[..] {
                [_, Operand::Reg(rm), Operand::Imm(n)] => (read_reg(st, insn, *rm), Some(*n as u32)),
                [_, Operand::Reg(rn), Operand::Reg(rm)] => (read_reg(st, insn, *rn), st.reg(*rm).map(|v| v & 0xff)),
                [Operand::Reg(rdn), Operand::Reg(rm)] => (read_reg(st, insn, *rdn), st.reg(*rm).map(|v| v & 0xff)),
                _ => return Err(unsupported(insn)),
            };
            let (r, c) = match value.zip(amount) {
                Some((v, n)) => {
                    let (r, c) = shift_c(v, kind, n, st.flags.c);
                    (Some(r), c)
                }
                None => (None, None),
            };
            if s {
                set_logical_flags(st, r, c);
            }
            write_result(st, rd, r)
        }
        Op::And | Op::Orr | Op::Eor | Op::Bic | Op::Tst | Op::Teq => {
            let (rd, a, src) = if matches!(op, Op::Tst | Op::Teq) {
                let rn = insn.reg(0).unwrap();
                (None, read_reg(st, insn, rn), src_from(st, insn, &insn.operands[1..]))
            } else {
                let (rd, a, src) = dp_operands(st, insn).ok_or_else(|| unsupported(insn))?;
                (Some(rd), a, src)
            };
            let r = a.zip(src.value).map(|(a, b)| match op {
                Op::And | Op::Tst => a & b,
                Op::Orr => a | b,
                Op::Eor | Op::Teq => a ^ b,
                _ => a & !b,
            });
            if s || rd.is_none() {
                set_logical_flags(st, r, src.carry);
            }
            match rd {
                Some(rd) => write_result(st, rd, r),
                None => Ok(Flow::Next),
            }
        }
        Op::Add | Op::Adc | Op::Sub | Op::Sbc | Op::Rsb | Op::Cmp | Op::Cmn | Op::Addw | Op::Subw => {
            let (rd, a, src) = if matches!(op, Op::Cmp | Op::Cmn) {
                let rn = insn.reg(0).unwrap();
                (None, read_reg(st, insn, rn), src_from(st, insn, &insn.operands[1..]))
            } else {
                let (rd, a, src) = dp_operands(st, insn).ok_or_else(|| unsupported(insn))?;
                (Some(rd), a, src)
            };
            let carry_in = match op {
                Op::Adc | Op::Sbc => st.flags.c,
                Op::Sub | Op::Subw | Op::Rsb | Op::Cmp => Some(true),
                _ => Some(false),
            };
            let res = match (a, src.value, carry_in) {
                (Some(a), Some(b), Some(c)) => Some(match op {
                    Op::Add | Op::Addw | Op::Adc | Op::Cmn => add_with_carry(a, b, c),
                    Op::Rsb => add_with_carry(!a, b, c),
                    _ => add_with_carry(a, !b, c),
                }),
                _ => None,
            };
            if s || rd.is_none() {
                match res {
                    Some((r, c, v)) => {
                        let (n, z) = nz(r);
                        st.flags = Flags { n, z, c: Some(c), v: Some(v) };
                    }
                    None => st.flags = Flags::default(),
                }
            }
            match rd {
                Some(rd) => write_result(st, rd, res.map(|r| r.0)),
                None => Ok(Flow::Next),
            }
        }
        Op::Mul | Op::Mla | Op::Mls => {
            let rd = insn.reg(0).unwrap();
            let a = st.reg(insn.reg(1).unwrap());
            let b = st.reg(insn.reg(2).unwrap());
            let prod = a.zip(b).map(|(a, b)| a.wrapping_mul(b));
            let r = match op {
                Op::Mul => prod,
                Op::Mla => prod.zip(st.reg(insn.reg(3).unwrap())).map(|(p, c)| c.wrapping_add(p)),
                _ => prod.zip(st.reg(insn.reg(3).unwrap())).map(|(p, c)| c.wrapping_sub(p)),
            };
            if s {
                let (n, z) = r.map(nz).unwrap_or((None, None));
                st.flags.n = n;
                st.flags.z = z;
            }
            write_result(st, rd, r)
        }
        Op::Udiv | Op::Sdiv => {
            let rd = insn.reg(0).unwrap();
            let a = st.reg(insn.reg(1).unwrap());
            let b = st.reg(insn.reg(2).unwrap());
            let r = a.zip(b).map(|(a, b)| match (op, b) {
                (_, 0) => 0,
                (Op::Udiv, b) => a / b,
                (_, b) => (a as i32).wrapping_div(b as i32) as u32,
            });
            write_result(st, rd, r)
        }
        Op::Sxtb | Op::Sxth | Op::Uxtb | Op::Uxth => {
            let r = st.reg(insn.reg(1).unwrap()).map(|v| ext(v, op));
            write_result(st, insn.reg(0).unwrap(), r)
        }
        Op::Rev | Op::Rev16 | Op::Revsh => {
            let r = st.reg(insn.reg(1).unwrap()).map(|v| match op {
                Op::Rev => v.swap_bytes(),
                Op::Rev16 => ((v & 0x00ff_00ff) << 8) | ((v & 0xff00_ff00) >> 8),
                _ => (v as u16).swap_bytes() as i16 as i32 as u32,
            });
            write_result(st, insn.reg(0).unwrap(), r)
        }
        Op::Clz => {
            let r = st.reg(insn.reg(1).unwrap()).map(|v| v.leading_zeros());
            write_result(st, insn.reg(0).unwrap(), r)
        }
        Op::Movw => write_result(st, insn.reg(0).unwrap(), Some(insn.imm(1).unwrap() as u32)),
        Op::Movt => {
            let rd = insn.reg(0).unwrap();
            let r = st.reg(rd).map(|v| (v & 0xffff) | ((insn.imm(1).unwrap() as u32) << 16));
            write_result(st, rd, r)
        }
        Op::Ubfx | Op::Sbfx | Op::Bfi => {
            let rd = insn.reg(0).unwrap();
            let lsb = insn.imm(2).unwrap() as u32;
            let width = insn.imm(3).unwrap() as u32;
            let mask = if width == 32 { u32::MAX } else { (1u32 << width) - 1 };
            let src = st.reg(insn.reg(1).unwrap());
            let r = match op {
                Op::Ubfx => src.map(|v| (v >> lsb) & mask),
                Op::Sbfx => src.map(|v| {
                    let f = (v >> lsb) & mask;
                    let sh = 32 - width;
                    (((f << sh) as i32) >> sh) as u32
                }),
                _ => src.zip(st.reg(rd)).map(|(s, d)| (d & !(mask << lsb)) | ((s & mask) << lsb)),
            };
            write_result(st, rd, r)
        }
        Op::Adr => {
            let t = match insn.operands[1] {
                Operand::Target(t) => t,
                _ => return Err(unsupported(insn)),
            };
            write_result(st, insn.reg(0).unwrap(), Some(t))
        }

        Op::Ldr | Op::Ldrb | Op::Ldrh | Op::Ldrsb | Op::Ldrsh => {
            let rt = insn.reg(0).unwrap();
            let size = op.access_size().unwrap();
            let (addr, wb) = mem_address(st, insn);
            let v = addr.and_then(|a| env.read(st, a, size)).map(|v| ext(v, op));
            if let Some((rn, val)) = wb {
                st.set_reg(rn, val);
            }
            write_result(st, rt, v)
        }
        Op::Str | Op::Strb | Op::Strh => {
            let v = read_reg(st, insn, insn.reg(0).unwrap());
            let size = op.access_size().unwrap();
            let (addr, wb) = mem_address(st, insn);
            st.write(addr, v, size);
            if let Some((rn, val)) = wb {
                st.set_reg(rn, val);
            }
            Ok(Flow::Next)
        }
        Op::Ldrd | Op::Strd => {
            let (rt, rt2) = (insn.reg(0).unwrap(), insn.reg(1).unwrap());
            let (addr, wb) = mem_address(st, insn);
            if op == Op::Ldrd {
                let lo = addr.and_then(|a| env.read(st, a, 4));
                let hi = addr.and_then(|a| env.read(st, a.wrapping_add(4), 4));
                st.set_reg(rt, lo);
                st.set_reg(rt2, hi);
            } else {
                let (lo, hi) = (st.reg(rt), st.reg(rt2));
                st.write(addr, lo, 4);
                st.write(addr.map(|a| a.wrapping_add(4)), hi, 4);
            }
            if let Some((rn, val)) = wb {
                st.set_reg(rn, val);
            }
            Ok(Flow::Next)
        }
        Op::Push | Op::Stmdb | Op::Stm => {
            let list = insn.reg_list().unwrap();
            let (rn, wb) = match op {
                Op::Push => (SP, true),
                _ => match insn.operands[0] {
                    Operand::RegWb(r) => (r, true),
                    Operand::Reg(r) => (r, false),
                    _ => return Err(unsupported(insn)),
                },
            };
            let n = list.count_ones();
            let base = st.reg(rn);
            let start = if op == Op::Stm { base } else { base.map(|b| b.wrapping_sub(4 * n)) };
            let mut a = start;
            for r in (0..16u8).filter(|r| list & (1 << r) != 0) {
                let v = read_reg(st, insn, r);
                st.write(a, v, 4);
                a = a.map(|x| x.wrapping_add(4));
            }
            if wb {
                let new = if op == Op::Stm { base.map(|b| b.wrapping_add(4 * n)) } else { start };
                st.set_reg(rn, new);
            }
            Ok(Flow::Next)
        }
        Op::Pop | Op::Ldm => {
            let list = insn.reg_list().unwrap();
            let (rn, wb) = match op {
                Op::Pop => (SP, true),
                _ => match insn.operands[0] {
                    Operand::RegWb(r) => (r, true),
                    Operand::Reg(r) => (r, false),
                    _ => return Err(unsupported(insn)),
                },
            };
            let base = st.reg(rn);
            let mut a = base;
            let mut pc = None;
            let mut loaded = Vec::new();
            for r in (0..16u8).filter(|r| list & (1 << r) != 0) {
                let v = a.and_then(|x| env.read(st, x, 4));
                if r == PC {
                    pc = Some(v);
                } else {
                    loaded.push((r, v));
                }
                a = a.map(|x| x.wrapping_add(4));
            }
            if wb && list & (1 << rn) == 0 {
                st.set_reg(rn, a);
            }
            for (r, v) in loaded {
                st.set_reg(r, v);
            }
            match pc {
                Some(t) => Ok(Flow::Indirect(t.map(|t| t & !1))),
                None => Ok(Flow::Next),
            }
        }

        Op::B => Ok(Flow::Jump(insn.target().unwrap())),
        Op::Bl => {
            st.set_reg(LR, Some(insn.end() | 1));
            Ok(Flow::Call { target: insn.target(), ret: insn.end() })
        }
        Op::Blx => {
            let t = st.reg(insn.reg(0).unwrap()).map(|t| t & !1);
            st.set_reg(LR, Some(insn.end() | 1));
            Ok(Flow::Call { target: t, ret: insn.end() })
        }
        Op::Bx => Ok(Flow::Indirect(read_reg(st, insn, insn.reg(0).unwrap()).map(|t| t & !1))),
        Op::Cbz | Op::Cbnz => {
            let taken = match force {
                Some(f) => Some(f),
                None => st.reg(insn.reg(0).unwrap()).map(|v| (v == 0) == (op == Op::Cbz)),
            };
            match taken {
                None => Ok(Flow::Indeterminate),
                Some(true) => Ok(Flow::Jump(insn.target().unwrap())),
                Some(false) => Ok(Flow::Next),
            }
        }
        Op::Tbb | Op::Tbh => {
            let m = insn.mem().unwrap();
            let (rm, _) = m.index.unwrap();
            let base = if m.base == PC { Some(insn.address + 4) } else { st.reg(m.base) };
            let size = if op == Op::Tbh { 2 } else { 1 };
            let entry = base
                .zip(st.reg(rm))
                .and_then(|(b, i)| env.read(st, b.wrapping_add(i.wrapping_mul(size)), size));
            Ok(Flow::Indirect(entry.map(|e| insn.address + 4 + 2 * e)))
        }
        Op::Unknown | Op::Unsupported => Err(unsupported(insn)),
    }
}

fn set_logical_flags(st: &mut MachineState, r: Option<u32>, carry: Option<bool>) {
    match r {
        Some(r) => {
            let (n, z) = nz(r);
            st.flags.n = n;
            st.flags.z = z;
            st.flags.c = carry;
        }
        None => {
            st.flags.n = None;
            st.flags.z = None;
            st.flags.c = None;
        }
    }
}

fn write_result(st: &mut MachineState, rd: u8, v: Option<u32>) -> Result<Flow, ExecError> {
    if rd == PC {
        return Ok(Flow::Indirect(v.map(|t| t & !1)));
    }
    st.set_reg(rd, v);
    Ok(Flow::Next)
}

/// Library routines executed natively instead of instruction by instruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Model {
    Memset,
    Udiv,
}

/// Bytes marked unknown by a memset whose length is unknown.
pub const UNKNOWN_MEMSET_SPAN: u32 = 256;

pub fn run_modeled(st: &mut MachineState, model: Model) {
    match model {
        Model::Memset => {
            let (dst, val, len) = (st.reg(0), st.reg(1), st.reg(2));
            match (dst, len) {
                (Some(d), Some(n)) => {
                    for i in 0..n {
                        st.mem.insert(d.wrapping_add(i), val.map(|v| v as u8));
                    }
                }
                (Some(d), None) => st.write_unknown(d, UNKNOWN_MEMSET_SPAN),
                (None, _) => st.wild_stores += 1,
            }
        }
        Model::Udiv => {
            let q = st.reg(0).zip(st.reg(1)).and_then(|(a, b)| a.checked_div(b));
            st.set_reg(0, q);
        }
    }
    for r in [1, 2, 3, 12] {
        st.set_reg(r, None);
    }
    st.flags = Flags::default();
}

/// Instruction count and wall-clock limits.
#[derive(Debug, Clone, Copy)]
pub struct Budget {
    pub max_instructions: u64,
    pub time_limit: Option<Duration>,
}

impl Budget {
    pub fn instructions(n: u64) -> Budget {
        Budget { max_instructions: n, time_limit: None }
    }

    pub fn meter(self) -> Meter {
        Meter { budget: self, executed: 0, deadline: self.time_limit.map(|d| Instant::now() + d) }
    }
}

#[derive(Debug, Clone)]
pub struct Meter {
    budget: Budget,
    pub executed: u64,
    deadline: Option<Instant>,
}

impl Meter {
    pub fn tick(&mut self) -> Result<(), ExecError> {
        if self.executed >= self.budget.max_instructions {
            return Err(ExecError::Budget(self.budget.max_instructions));
        }
        self.executed += 1;
        if self.executed % 512 == 0 {
            self.check_time()?;
        }
        Ok(())
    }

    pub fn check_time(&self) -> Result<(), ExecError> {
        match self.deadline {
            Some(d) if Instant::now() >= d => Err(ExecError::Timeout),
            _ => Ok(()),
        }
    }
}

/// Fetches the instruction at `pc`, decoding directly when the listing has none.
pub fn fetch(listing: &Listing, img: &FirmwareImage, pc: u32) -> Result<Instruction, ExecError> {
    if let Some(i) = listing.get(pc) {
        return Ok(i.clone());
    }
    if !img.contains(pc) || img.is_data(pc) {
        return Err(ExecError::NoCode(pc));
    }
    Ok(decode(img.slice_from(pc), pc, ItState::default()))
}

/// Why [`run_function`] stopped.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RunEnd {
    Returned,
    Indeterminate(u32),
    UnknownTarget(u32),
    Svc(u32),
    Trap(u32),
}

/// Runs from `entry` until control returns to the sentinel return address.
///
/// Nested calls are followed; `models` maps callee addresses to native models.
pub fn run_function(
    st: &mut MachineState,
    entry: u32,
    listing: &Listing,
    env: &Env,
    models: &BTreeMap<u32, Model>,
    meter: &mut Meter,
) -> Result<RunEnd, ExecError> {
    const SENTINEL: u32 = 0xffff_fff0;
    st.set_reg(LR, Some(SENTINEL | 1));
    let mut pc = entry;
    loop {
        if pc == SENTINEL {
            return Ok(RunEnd::Returned);
        }
        meter.tick()?;
        let insn = fetch(listing, env.img, pc)?;
        match step(st, &insn, env)? {
            Flow::Next => pc = insn.end(),
            Flow::Jump(t) => pc = t,
            Flow::Indirect(Some(t)) => pc = t,
            Flow::Indirect(None) => return Ok(RunEnd::UnknownTarget(insn.address)),
            Flow::Call { target: Some(t), ret } => match models.get(&t) {
                Some(m) => {
                    run_modeled(st, *m);
                    pc = ret;
                }
                None => pc = t,
            },
            Flow::Call { target: None, .. } => return Ok(RunEnd::UnknownTarget(insn.address)),
            Flow::Indeterminate => return Ok(RunEnd::Indeterminate(insn.address)),
            Flow::Svc(_) => return Ok(RunEnd::Svc(insn.address)),
            Flow::Trap => return Ok(RunEnd::Trap(insn.address)),
        }
    }
}
