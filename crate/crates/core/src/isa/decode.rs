use smallvec::smallvec;

use super::*;

/// IT-block execution state (`firstcond:mask`).
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct ItState(pub u8);

impl ItState {
    pub fn from_it(insn: &Instruction) -> ItState {
        ItState((insn.raw & 0xff) as u8)
    }

    pub fn active(self) -> bool {
        self.0 & 0xf != 0
    }

    pub fn cond(self) -> Option<Cond> {
        self.active().then_some(Cond(self.0 >> 4))
    }

    pub fn advance(self) -> ItState {
        if self.0 & 0x7 == 0 {
            ItState(0)
        } else {
            ItState((self.0 & 0xe0) | ((self.0 << 1) & 0x1f))
        }
    }
}

/// Decodes the instruction at the start of `bytes`.
pub fn decode(bytes: &[u8], address: u32, it: ItState) -> Instruction {
    let hw = |i: usize| bytes.get(i..i + 2).map(|b| u16::from_le_bytes([b[0], b[1]]));
    let hw1 = hw(0).unwrap_or_else(|| bytes.first().copied().unwrap_or(0) as u16);
    decode_halfwords(hw1, hw(2), address, it)
}

pub fn decode_halfwords(hw1: u16, hw2: Option<u16>, address: u32, it: ItState) -> Instruction {
    let mut insn = if hw1 >> 11 >= 0b11101 {
        match hw2 {
            Some(hw2) => decode32(hw1 as u32, hw2 as u32, address),
            None => base(Op::Unknown, 2, address, hw1 as u32),
        }
    } else {
        decode16(hw1 as u32, address, it.active())
    };
    if let Some(c) = it.cond() {
        if insn.op != Op::It && !insn.is_invalid() {
            insn.cond = Some(c);
            insn.in_it = true;
        }
    }
    insn
}

fn base(op: Op, width: u8, address: u32, raw: u32) -> Instruction {
    Instruction {
        address,
        width,
        op,
        setflags: false,
        cond: None,
        in_it: false,
        operands: SmallVec::new(),
        raw,
        imm_carry: false,
    }
}

fn with(mut i: Instruction, ops: SmallVec<[Operand; 4]>) -> Instruction {
    i.operands = ops;
    i
}

fn sext(v: u32, bits: u32) -> i32 {
    let shift = 32 - bits;
    ((v << shift) as i32) >> shift
}

use Operand::{Imm, Reg, Target};

fn mem_imm(base: u32, offset: i32) -> Operand {
    Operand::Mem(Mem { base: base as u8, index: None, offset, mode: AddrMode::Offset })
}

fn mem_reg(base: u32, rm: u32, shift: u32) -> Operand {
    Operand::Mem(Mem { base: base as u8, index: Some((rm as u8, shift as u8)), offset: 0, mode: AddrMode::Offset })
}

fn r(n: u32) -> Operand {
    Reg(n as u8)
}

fn decode16(hw: u32, a: u32, in_it: bool) -> Instruction {
    let b = |op| base(op, 2, a, hw);
    let flags = |mut i: Instruction| {
        i.setflags = !in_it;
        i
    };
    let rd = hw & 7;
    let rn = (hw >> 3) & 7;
    match hw >> 11 {
        0b00000..=0b00010 => {
            let imm5 = (hw >> 6) & 0x1f;
            let kind = hw >> 11;
            if kind == 0 && imm5 == 0 {
                return flags(with(b(Op::Mov), smallvec![r(rd), r(rn)]));
            }
            let (op, amt) = match kind {
                0 => (Op::Lsl, imm5),
                1 => (Op::Lsr, if imm5 == 0 { 32 } else { imm5 }),
                _ => (Op::Asr, if imm5 == 0 { 32 } else { imm5 }),
            };
            flags(with(b(op), smallvec![r(rd), r(rn), Imm(amt as i64)]))
        }
        0b00011 => {
            let third = (hw >> 6) & 7;
            let (op, src) = match (hw >> 9) & 3 {
                0 => (Op::Add, r(third)),
                1 => (Op::Sub, r(third)),
                2 => (Op::Add, Imm(third as i64)),
                _ => (Op::Sub, Imm(third as i64)),
            };
            flags(with(b(op), smallvec![r(rd), r(rn), src]))
        }
        0b00100..=0b00111 => {
            let rdn = (hw >> 8) & 7;
            let imm = Imm((hw & 0xff) as i64);
            match (hw >> 11) & 3 {
                0 => flags(with(b(Op::Mov), smallvec![r(rdn), imm])),
                1 => with(b(Op::Cmp), smallvec![r(rdn), imm]),
                2 => flags(with(b(Op::Add), smallvec![r(rdn), imm])),
                _ => flags(with(b(Op::Sub), smallvec![r(rdn), imm])),
            }
        }
        0b01000 => {
            if hw & 0x400 == 0 {
                let op = match (hw >> 6) & 0xf {
                    0 => Op::And,
                    1 => Op::Eor,
                    2 => Op::Lsl,
                    3 => Op::Lsr,
                    4 => Op::Asr,
                    5 => Op::Adc,
                    6 => Op::Sbc,
                    7 => Op::Ror,
                    8 => return with(b(Op::Tst), smallvec![r(rd), r(rn)]),
                    9 => return flags(with(b(Op::Rsb), smallvec![r(rd), r(rn), Imm(0)])),
                    10 => return with(b(Op::Cmp), smallvec![r(rd), r(rn)]),
                    11 => return with(b(Op::Cmn), smallvec![r(rd), r(rn)]),
                    12 => Op::Orr,
                    13 => return flags(with(b(Op::Mul), smallvec![r(rd), r(rn), r(rd)])),
                    14 => Op::Bic,
                    _ => Op::Mvn,
                };
                return flags(with(b(op), smallvec![r(rd), r(rn)]));
            }
            let rdn = ((hw >> 4) & 8) | rd;
            let rm = (hw >> 3) & 0xf;
            match (hw >> 8) & 3 {
                0 => with(b(Op::Add), smallvec![r(rdn), r(rm)]),
                1 => with(b(Op::Cmp), smallvec![r(rdn), r(rm)]),
                2 => with(b(Op::Mov), smallvec![r(rdn), r(rm)]),
                _ => {
                    if hw & 7 != 0 {
                        return b(Op::Unknown);
                    }
                    let op = if hw & 0x80 == 0 { Op::Bx } else { Op::Blx };
                    with(b(op), smallvec![r(rm)])
                }
            }
        }
        0b01001 => {
            let rt = (hw >> 8) & 7;
            with(b(Op::Ldr), smallvec![r(rt), mem_imm(15, ((hw & 0xff) * 4) as i32)])
        }
        0b01010 | 0b01011 => {
            let op = [Op::Str, Op::Strh, Op::Strb, Op::Ldrsb, Op::Ldr, Op::Ldrh, Op::Ldrb, Op::Ldrsh][((hw >> 9) & 7) as usize];
            with(b(op), smallvec![r(rd), mem_reg(rn, (hw >> 6) & 7, 0)])
        }
        0b01100..=0b10001 => {
            let imm5 = (hw >> 6) & 0x1f;
            let (op, scale) = match hw >> 11 {
                0b01100 => (Op::Str, 4),
                0b01101 => (Op::Ldr, 4),
                0b01110 => (Op::Strb, 1),
                0b01111 => (Op::Ldrb, 1),
                0b10000 => (Op::Strh, 2),
                _ => (Op::Ldrh, 2),
            };
            with(b(op), smallvec![r(rd), mem_imm(rn, (imm5 * scale) as i32)])
        }
        0b10010 | 0b10011 => {
            let op = if hw & 0x800 == 0 { Op::Str } else { Op::Ldr };
            with(b(op), smallvec![r((hw >> 8) & 7), mem_imm(13, ((hw & 0xff) * 4) as i32)])
        }
        0b10100 => {
            let t = ((a + 4) & !3) + (hw & 0xff) * 4;
            with(b(Op::Adr), smallvec![r((hw >> 8) & 7), Target(t)])
        }
        0b10101 => with(b(Op::Add), smallvec![r((hw >> 8) & 7), r(13), Imm(((hw & 0xff) * 4) as i64)]),
        0b10110 | 0b10111 => decode_misc16(hw, a),
        0b11000 | 0b11001 => {
            let rn = (hw >> 8) & 7;
            let list = (hw & 0xff) as u16;
            if hw & 0x800 == 0 {
                with(b(Op::Stm), smallvec![Operand::RegWb(rn as u8), Operand::List(list)])
            } else {
                let wb = list & (1 << rn) == 0;
                let base_op = if wb { Operand::RegWb(rn as u8) } else { r(rn) };
                with(b(Op::Ldm), smallvec![base_op, Operand::List(list)])
            }
        }
        0b11010 | 0b11011 => {
            let cond = (hw >> 8) & 0xf;
            let imm8 = hw & 0xff;
            match cond {
                0xe => with(b(Op::Udf), smallvec![Imm(imm8 as i64)]),
                0xf => with(b(Op::Svc), smallvec![Imm(imm8 as i64)]),
                _ => {
                    let t = (a as i32 + 4 + sext(imm8 << 1, 9)) as u32;
                    let mut i = with(b(Op::B), smallvec![Target(t)]);
                    i.cond = Some(Cond(cond as u8));
                    i
                }
            }
        }
        0b11100 => {
            let t = (a as i32 + 4 + sext((hw & 0x7ff) << 1, 12)) as u32;
            with(b(Op::B), smallvec![Target(t)])
        }
        _ => b(Op::Unknown),
    }
}

fn decode_misc16(hw: u32, a: u32) -> Instruction {
    let b = |op| base(op, 2, a, hw);
    let rd = hw & 7;
    let rm = (hw >> 3) & 7;
    if hw & 0xff00 == 0xb000 {
        let op = if hw & 0x80 == 0 { Op::Add } else { Op::Sub };
        return with(b(op), smallvec![r(13), Imm(((hw & 0x7f) * 4) as i64)]);
    }
    if hw & 0xf500 == 0xb100 {
        let off = (((hw >> 9) & 1) << 6) | (((hw >> 3) & 0x1f) << 1);
        let op = if hw & 0x800 == 0 { Op::Cbz } else { Op::Cbnz };
        return with(b(op), smallvec![r(rd), Target(a + 4 + off)]);
    }
    if hw & 0xff00 == 0xb200 {
        let op = [Op::Sxth, Op::Sxtb, Op::Uxth, Op::Uxtb][((hw >> 6) & 3) as usize];
        return with(b(op), smallvec![r(rd), r(rm)]);
    }
    if hw & 0xfe00 == 0xb400 {
        let list = (hw & 0xff) as u16 | if hw & 0x100 != 0 { 1 << 14 } else { 0 };
        if list == 0 {
            return b(Op::Unknown);
        }
        return with(b(Op::Push), smallvec![Operand::List(list)]);
    }
    if hw & 0xfe00 == 0xbc00 {
        let list = (hw & 0xff) as u16 | if hw & 0x100 != 0 { 1 << 15 } else { 0 };
        if list == 0 {
            return b(Op::Unknown);
        }
        return with(b(Op::Pop), smallvec![Operand::List(list)]);
    }
    if hw & 0xffe8 == 0xb660 && hw & 7 != 0 && hw & 4 == 0 {
        let op = if hw & 0x10 == 0 { Op::Cpsie } else { Op::Cpsid };
        let sym = match hw & 3 {
            2 => "i",
            1 => "f",
            _ => return b(Op::Unknown),
        };
        return with(b(op), smallvec![Operand::Sym(sym)]);
    }
    if hw & 0xff00 == 0xba00 {
        let op = match (hw >> 6) & 3 {
            0 => Op::Rev,
            1 => Op::Rev16,
            3 => Op::Revsh,
            _ => return b(Op::Unknown),
        };
        return with(b(op), smallvec![r(rd), r(rm)]);
    }
    if hw & 0xff00 == 0xbe00 {
        return with(b(Op::Bkpt), smallvec![Imm((hw & 0xff) as i64)]);
    }
    if hw & 0xff00 == 0xbf00 {
        if hw & 0xf != 0 {
            let first = (hw >> 4) & 0xf;
            if first == 0xf || (first == 0xe && (hw & 0xf).count_ones() != 1) {
                return b(Op::Unknown);
            }
            let mut i = b(Op::It);
            i.cond = Some(Cond(first as u8));
            return i;
        }
        return match (hw >> 4) & 0xf {
            0 => b(Op::Nop),
            1 => b(Op::Yield),
            2 => b(Op::Wfe),
            3 => b(Op::Wfi),
            4 => b(Op::Sev),
            _ => b(Op::Unknown),
        };
    }
    b(Op::Unknown)
}

fn thumb_expand_imm(imm12: u32) -> (u32, bool) {
    let imm8 = imm12 & 0xff;
    if imm12 >> 10 == 0 {
        let v = match (imm12 >> 8) & 3 {
            0 => imm8,
            1 => (imm8 << 16) | imm8,
            2 => (imm8 << 24) | (imm8 << 8),
            _ => imm8 * 0x0101_0101,
        };
        (v, false)
    } else {
        let un = 0x80 | (imm12 & 0x7f);
        (un.rotate_right(imm12 >> 7), true)
    }
}

fn dp_op(op: u32, rn: u32, rd: u32, s: bool) -> Option<(Op, bool, bool)> {
    // (opcode, has rd, has rn)
    Some(match op {
        0b0000 if rd == 15 && s => (Op::Tst, false, true),
        0b0000 => (Op::And, true, true),
        0b0001 => (Op::Bic, true, true),
        0b0010 if rn == 15 => (Op::Mov, true, false),
        0b0010 => (Op::Orr, true, true),
        0b0011 if rn == 15 => (Op::Mvn, true, false),
        0b0100 if rd == 15 && s => (Op::Teq, false, true),
        0b0100 => (Op::Eor, true, true),
        0b1000 if rd == 15 && s => (Op::Cmn, false, true),
        0b1000 => (Op::Add, true, true),
        0b1010 => (Op::Adc, true, true),
        0b1011 => (Op::Sbc, true, true),
        0b1101 if rd == 15 && s => (Op::Cmp, false, true),
        0b1101 => (Op::Sub, true, true),
        0b1110 => (Op::Rsb, true, true),
        _ => return None,
    })
}

fn decode32(hw1: u32, hw2: u32, a: u32) -> Instruction {
    let raw = (hw1 << 16) | hw2;
    let b = |op| base(op, 4, a, raw);
    let unsupported = base(Op::Unsupported, 4, a, raw);
    let rn = hw1 & 0xf;
    let rd = (hw2 >> 8) & 0xf;
    let rt = hw2 >> 12;
    let rm = hw2 & 0xf;
    let op1 = (hw1 >> 11) & 3;

    match op1 {
        0b01 => {
            if hw1 & 0xfe40 == 0xe800 {
                let wb = hw1 & 0x20 != 0;
                let load = hw1 & 0x10 != 0;
                let list = hw2 as u16;
                let base_op = if wb { Operand::RegWb(rn as u8) } else { r(rn) };
                let op = match ((hw1 >> 7) & 3, load) {
                    (0b01, false) => Op::Stm,
                    (0b01, true) => Op::Ldm,
                    (0b10, false) => Op::Stmdb,
                    _ => return unsupported,
                };
                return with(b(op), smallvec![base_op, Operand::List(list)]);
            }
            if hw1 & 0xfe40 == 0xe840 {
                if hw1 & 0xfff0 == 0xe8d0 && hw2 & 0xffe0 == 0xf000 {
                    let h = hw2 & 0x10 != 0;
                    return if h {
                        with(b(Op::Tbh), smallvec![mem_reg(rn, rm, 1)])
                    } else {
                        with(b(Op::Tbb), smallvec![mem_reg(rn, rm, 0)])
                    };
                }
                let p = hw1 & 0x100 != 0;
                let u = hw1 & 0x80 != 0;
                let w = hw1 & 0x20 != 0;
                if !p && !w {
                    return unsupported;
                }
                let off = ((hw2 & 0xff) * 4) as i32;
                let off = if u { off } else { -off };
                let mode = match (p, w) {
                    (true, false) => AddrMode::Offset,
                    (true, true) => AddrMode::PreIndex,
                    _ => AddrMode::PostIndex,
                };
                let op = if hw1 & 0x10 != 0 { Op::Ldrd } else { Op::Strd };
                let m = Operand::Mem(Mem { base: rn as u8, index: None, offset: off, mode });
                return with(b(op), smallvec![r(rt), r(rd), m]);
            }
            if hw1 & 0xfe00 == 0xea00 {
                let s = hw1 & 0x10 != 0;
                let Some((op, has_rd, has_rn)) = dp_op((hw1 >> 5) & 0xf, rn, rd, s) else {
                    return unsupported;
                };
                let imm5 = (((hw2 >> 12) & 7) << 2) | ((hw2 >> 6) & 3);
                let ty = (hw2 >> 4) & 3;
                let amount = match (ty, imm5) {
                    (0, n) => n,
                    (1 | 2, 0) => 32,
                    (3, 0) => return unsupported,
                    (_, n) => n,
                };
                let kind = ShiftKind::from_bits(ty);
                if op == Op::Mov && amount != 0 {
                    let sop = match kind {
                        ShiftKind::Lsl => Op::Lsl,
                        ShiftKind::Lsr => Op::Lsr,
                        ShiftKind::Asr => Op::Asr,
                        ShiftKind::Ror => Op::Ror,
                    };
                    let mut i = with(b(sop), smallvec![r(rd), r(rm), Imm(amount as i64)]);
                    i.setflags = s;
                    return i;
                }
                let mut ops: SmallVec<[Operand; 4]> = SmallVec::new();
                if has_rd {
                    ops.push(r(rd));
                }
                if has_rn {
                    ops.push(r(rn));
                }
                ops.push(r(rm));
                if amount != 0 {
                    ops.push(Operand::Shift(kind, amount as u8));
                }
                let mut i = with(b(op), ops);
                i.setflags = s && has_rd;
                return i;
            }
            unsupported
        }
        0b10 => {
            if hw2 & 0x8000 == 0 {
                if hw1 & 0x200 == 0 {
                    let s = hw1 & 0x10 != 0;
                    let Some((op, has_rd, has_rn)) = dp_op((hw1 >> 5) & 0xf, rn, rd, s) else {
                        return unsupported;
                    };
                    let imm12 = (((hw1 >> 10) & 1) << 11) | (((hw2 >> 12) & 7) << 8) | (hw2 & 0xff);
                    let (v, rotated) = thumb_expand_imm(imm12);
                    let mut ops: SmallVec<[Operand; 4]> = SmallVec::new();
                    if has_rd {
                        ops.push(r(rd));
                    }
                    if has_rn {
                        ops.push(r(rn));
                    }
                    ops.push(Imm(v as i64));
                    let mut i = with(b(op), ops);
                    i.setflags = s && has_rd;
                    i.imm_carry = rotated;
                    return i;
                }
                let imm12 = (((hw1 >> 10) & 1) << 11) | (((hw2 >> 12) & 7) << 8) | (hw2 & 0xff);
                return match (hw1 >> 4) & 0x1f {
                    0b00000 if rn != 15 => with(b(Op::Addw), smallvec![r(rd), r(rn), Imm(imm12 as i64)]),
                    0b01010 if rn != 15 => with(b(Op::Subw), smallvec![r(rd), r(rn), Imm(imm12 as i64)]),
                    0b00100 | 0b01100 => {
                        let v = (rn << 12) | imm12;
                        let op = if hw1 & 0x80 == 0 { Op::Movw } else { Op::Movt };
                        with(b(op), smallvec![r(rd), Imm(v as i64)])
                    }
                    op @ (0b10100 | 0b11100 | 0b10110) => {
                        let lsb = (((hw2 >> 12) & 7) << 2) | ((hw2 >> 6) & 3);
                        let field = hw2 & 0x1f;
                        match op {
                            0b10110 => {
                                if rn == 15 || field < lsb {
                                    return unsupported;
                                }
                                with(b(Op::Bfi), smallvec![r(rd), r(rn), Imm(lsb as i64), Imm((field - lsb + 1) as i64)])
                            }
                            _ => {
                                if lsb + field + 1 > 32 {
                                    return unsupported;
                                }
                                let o = if op == 0b11100 { Op::Ubfx } else { Op::Sbfx };
                                with(b(o), smallvec![r(rd), r(rn), Imm(lsb as i64), Imm((field + 1) as i64)])
                            }
                        }
                    }
                    _ => unsupported,
                };
            }
            // Branches and miscellaneous control.
            let s = (hw1 >> 10) & 1;
            let j1 = (hw2 >> 13) & 1;
            let j2 = (hw2 >> 11) & 1;
            match (hw2 >> 12) & 5 {
                0b000 => {
                    if (hw1 >> 7) & 7 != 7 {
                        let cond = (hw1 >> 6) & 0xf;
                        let imm = (s << 20) | (j2 << 19) | (j1 << 18) | ((hw1 & 0x3f) << 12) | ((hw2 & 0x7ff) << 1);
                        let t = (a as i32 + 4 + sext(imm, 21)) as u32;
                        let mut i = with(b(Op::B), smallvec![Target(t)]);
                        i.cond = Some(Cond(cond as u8));
                        return i;
                    }
                    if hw1 & 0xfff0 == 0xf380 && hw2 & 0xff00 == 0x8800 {
                        let Some(sym) = sysreg(hw2 & 0xff) else { return unsupported };
                        return with(b(Op::Msr), smallvec![Operand::Sym(sym), r(rn)]);
                    }
                    if hw1 == 0xf3ef && hw2 & 0xf000 == 0x8000 {
                        let Some(sym) = sysreg(hw2 & 0xff) else { return unsupported };
                        return with(b(Op::Mrs), smallvec![r(rd), Operand::Sym(sym)]);
                    }
                    if hw1 == 0xf3bf && hw2 & 0xff00 == 0x8f00 && hw2 & 0xf == 0xf {
                        let op = match (hw2 >> 4) & 0xf {
                            4 => Op::Dsb,
                            5 => Op::Dmb,
                            6 => Op::Isb,
                            _ => return unsupported,
                        };
                        return with(b(op), smallvec![Operand::Sym("sy")]);
                    }
                    unsupported
                }
                0b001 | 0b101 => {
                    let i1 = !(j1 ^ s) & 1;
                    let i2 = !(j2 ^ s) & 1;
                    let imm = (s << 24) | (i1 << 23) | (i2 << 22) | ((hw1 & 0x3ff) << 12) | ((hw2 & 0x7ff) << 1);
                    let t = (a as i32 + 4 + sext(imm, 25)) as u32;
                    let op = if hw2 & 0x4000 != 0 { Op::Bl } else { Op::B };
                    with(b(op), smallvec![Target(t)])
                }
                _ => unsupported,
            }
        }
        _ => decode32_op11(hw1, hw2, a),
    }
}

fn sysreg(sysm: u32) -> Option<&'static str> {
    Some(match sysm {
        0 => "apsr",
        5 => "ipsr",
        6 => "epsr",
        8 => "msp",
        9 => "psp",
        16 => "primask",
        17 => "basepri",
        19 => "faultmask",
        20 => "control",
        _ => return None,
    })
}

fn decode32_op11(hw1: u32, hw2: u32, a: u32) -> Instruction {
    let raw = (hw1 << 16) | hw2;
    let b = |op| base(op, 4, a, raw);
    let unsupported = base(Op::Unsupported, 4, a, raw);
    let rn = hw1 & 0xf;
    let rd = (hw2 >> 8) & 0xf;
    let rt = hw2 >> 12;
    let rm = hw2 & 0xf;

    if hw1 & 0xfe00 == 0xf800 || hw1 & 0xfe00 == 0xf900 {
        let signed = hw1 & 0x100 != 0;
        let load = hw1 & 0x10 != 0;
        let size = (hw1 >> 5) & 3;
        let op = match (size, signed, load) {
            (0, false, false) => Op::Strb,
            (1, false, false) => Op::Strh,
            (2, false, false) => Op::Str,
            (0, false, true) => Op::Ldrb,
            (1, false, true) => Op::Ldrh,
            (2, false, true) => Op::Ldr,
            (0, true, true) => Op::Ldrsb,
            (1, true, true) => Op::Ldrsh,
            _ => return unsupported,
        };
        // pld/pli hints
        if load && rt == 15 && op != Op::Ldr {
            return unsupported;
        }
        if load && rn == 15 {
            let u = hw1 & 0x80 != 0;
            let off = (hw2 & 0xfff) as i32;
            return with(b(op), smallvec![r(rt), mem_imm(15, if u { off } else { -off })]);
        }
        if !load && rn == 15 {
            return unsupported;
        }
        if hw1 & 0x80 != 0 {
            return with(b(op), smallvec![r(rt), mem_imm(rn, (hw2 & 0xfff) as i32)]);
        }
        if hw2 & 0x800 != 0 {
            let p = hw2 & 0x400 != 0;
            let u = hw2 & 0x200 != 0;
            let w = hw2 & 0x100 != 0;
            let imm = (hw2 & 0xff) as i32;
            let off = if u { imm } else { -imm };
            let mode = match (p, w) {
                (true, false) if !u => AddrMode::Offset,
                (true, true) => AddrMode::PreIndex,
                (false, true) => AddrMode::PostIndex,
                _ => return unsupported,
            };
            let m = Operand::Mem(Mem { base: rn as u8, index: None, offset: off, mode });
            return with(b(op), smallvec![r(rt), m]);
        }
        if hw2 & 0x7c0 == 0 {
            return with(b(op), smallvec![r(rt), mem_reg(rn, rm, (hw2 >> 4) & 3)]);
        }
        return unsupported;
    }

    if hw1 & 0xff00 == 0xfa00 && hw2 & 0xf000 == 0xf000 {
        let op4 = (hw1 >> 4) & 0xf;
        if op4 & 0x8 == 0 && hw2 & 0xf0 == 0 {
            let op = match (op4 >> 1) & 3 {
                0 => Op::Lsl,
                1 => Op::Lsr,
                2 => Op::Asr,
                _ => Op::Ror,
            };
            let mut i = with(b(op), smallvec![r(rd), r(rn), r(rm)]);
            i.setflags = op4 & 1 != 0;
            return i;
        }
        if rn == 15 && hw2 & 0xf0 == 0x80 {
            let op = match op4 {
                0b0000 => Op::Sxth,
                0b0001 => Op::Uxth,
                0b0100 => Op::Sxtb,
                0b0101 => Op::Uxtb,
                _ => return unsupported,
            };
            return with(b(op), smallvec![r(rd), r(rm)]);
        }
        if op4 == 0b1011 && hw2 & 0xf0 == 0x80 && rn == rm {
            return with(b(Op::Clz), smallvec![r(rd), r(rm)]);
        }
        return unsupported;
    }

    if hw1 & 0xfff0 == 0xfb00 {
        let ra = rt;
        return match (hw2 >> 4) & 3 {
            0 if ra == 15 => with(b(Op::Mul), smallvec![r(rd), r(rn), r(rm)]),
            0 => with(b(Op::Mla), smallvec![r(rd), r(rn), r(rm), r(ra)]),
            1 => with(b(Op::Mls), smallvec![r(rd), r(rn), r(rm), r(ra)]),
            _ => unsupported,
        };
    }
    if (hw1 & 0xfff0 == 0xfb90 || hw1 & 0xfff0 == 0xfbb0) && hw2 & 0xf0f0 == 0xf0f0 {
        let op = if hw1 & 0x20 != 0 { Op::Udiv } else { Op::Sdiv };
        return with(b(op), smallvec![r(rd), r(rn), r(rm)]);
    }
    unsupported
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d16(hw: u16, a: u32) -> String {
        decode_halfwords(hw, None, a, ItState::default()).to_string()
    }

    #[test]
    fn figure_one_listing() {
        assert_eq!(d16(0x4ab8, 0x1eaba), "ldr r2, [pc, #736]");
        assert_eq!(d16(0xab06, 0x1eabc), "add r3, sp, #24");
        assert_eq!(d16(0x6811, 0x1eabe), "ldr r1, [r2, #0]");
        assert_eq!(d16(0x2022, 0x1eac0), "movs r0, #34");
        assert_eq!(d16(0x9106, 0x1eac2), "str r1, [sp, #24]");
        assert_eq!(d16(0x8891, 0x1eac4), "ldrh r1, [r2, #4]");
        assert_eq!(d16(0x8099, 0x1eac6), "strh r1, [r3, #4]");
        assert_eq!(d16(0x7992, 0x1eac8), "ldrb r2, [r2, #6]");
        assert_eq!(d16(0xa908, 0x1eaca), "add r1, sp, #32");
        assert_eq!(d16(0x719a, 0x1eacc), "strb r2, [r3, #6]");
        assert_eq!(d16(0x9308, 0x1eace), "str r3, [sp, #32]");
        let bl = decode_halfwords(0xf7ff, Some(0xfe3a), 0x1ead0, ItState::default());
        assert_eq!(bl.to_string(), "bl 0x1e748");
        // The same bytes at the stripped address.
        let bl = decode_halfwords(0xf7ff, Some(0xfe3a), 0x3ad0, ItState::default());
        assert_eq!(bl.target(), Some(0x3748));
        assert_eq!(decode_halfwords(0x4ab8, None, 0x1eaba, ItState::default()).literal(), Some((0x1ed9c, 4)));
    }

    #[test]
    fn invalid_encodings_are_kept() {
        assert_eq!(d16(0xde00, 0), "udf #0");
        assert_eq!(d16(0xb500 & 0xfe00, 0), ".hword 0xb400");
        let i = decode_halfwords(0xf7f0, Some(0xa000), 0, ItState::default());
        assert_eq!(i.op, Op::Unsupported);
        assert_eq!(i.width, 4);
        let tail = decode(&[0x00, 0xf0], 0x10, ItState::default());
        assert_eq!((tail.op, tail.width), (Op::Unknown, 2));
    }

    #[test]
    fn it_state_sequence() {
        // ite eq: eq, ne
        let it = decode_halfwords(0xbf0c, None, 0, ItState::default());
        let mut st = ItState::from_it(&it);
        assert_eq!(st.cond(), Some(Cond::EQ));
        st = st.advance();
        assert_eq!(st.cond(), Some(Cond::NE));
        st = st.advance();
        assert!(!st.active());
        assert_eq!(it.to_string(), "ite eq");
    }
}
