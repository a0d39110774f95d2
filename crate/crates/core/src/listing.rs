//! Annotation-aware disassembly of an image.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::RangeBounds;

use crate::image::{AnnotateOutcome, CodeSource, DataSource, FirmwareImage};
use crate::isa::{decode, decode_halfwords, Instruction, ItState, Op};

#[derive(Debug, Clone)]
struct Entry {
    insn: Instruction,
    it: ItState,
}

/// Instructions keyed by address; bytes annotated as data are skipped.
#[derive(Debug, Clone, Default)]
pub struct Listing {
    map: BTreeMap<u32, Entry>,
    /// Addresses known to start an instruction; decoding never straddles them.
    anchors: BTreeSet<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reinterpret {
    Code(CodeSource),
    Data(DataSource),
}

impl Listing {
    pub fn build(img: &FirmwareImage) -> Listing {
        let mut l = Listing::default();
        l.resync(img, img.code_base(), u32::MAX);
        l
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn get(&self, addr: u32) -> Option<&Instruction> {
        self.map.get(&addr).map(|e| &e.insn)
    }

    pub fn iter(&self) -> impl DoubleEndedIterator<Item = &Instruction> + '_ {
        self.map.values().map(|e| &e.insn)
    }

    pub fn range<R: RangeBounds<u32>>(&self, r: R) -> impl DoubleEndedIterator<Item = &Instruction> + '_ {
        self.map.range(r).map(|(_, e)| &e.insn)
    }

    /// First instruction at or after `addr`.
    pub fn at_or_after(&self, addr: u32) -> Option<&Instruction> {
        self.range(addr..).next()
    }

    /// The instruction whose bytes cover `addr`.
    pub fn containing(&self, addr: u32) -> Option<&Instruction> {
        self.range(..=addr).next_back().filter(|i| i.end() > addr)
    }

    /// Up to `n` instructions immediately preceding `addr`, nearest first,
    /// stopping at gaps (data).
    pub fn preceding(&self, addr: u32, n: usize) -> Vec<&Instruction> {
        let mut out = Vec::new();
        let mut expect = addr;
        for i in self.range(..addr).rev() {
            if i.end() != expect || out.len() == n {
                break;
            }
            expect = i.address;
            out.push(i);
        }
        out
    }

    /// Changes the annotation of `[addr, addr + n)` and re-decodes the
    /// surrounding instructions.
    pub fn reinterpret(&mut self, img: &mut FirmwareImage, addr: u32, n: u32, as_: Reinterpret) -> AnnotateOutcome {
        if n == 0 {
            return AnnotateOutcome::default();
        }
        let out = match as_ {
            Reinterpret::Code(src) => img.annotate_code(addr, n, src),
            Reinterpret::Data(src) => img.annotate_data(addr, n, src),
        };
        if let Reinterpret::Code(_) = as_ {
            self.anchors.insert(addr & !1);
        }
        let from = self.containing(addr).map_or(addr & !1, |i| i.address);
        self.resync(img, from, addr + n);
        out
    }

    /// Re-decodes from `from` until the stream re-joins the existing listing
    /// past `through`.
    pub fn resync(&mut self, img: &FirmwareImage, from: u32, through: u32) {
        let end = img.end();
        let mut pos = from;
        let mut it = self.it_state_at(from);
        while pos < end {
            if img.is_data(pos) || img.is_data(pos + 1) || pos + 1 >= end {
                let next = (img.data_run_end(pos + 1).max(pos + 2) + 1) & !1;
                let stale: Vec<u32> = self.map.range(pos..next).map(|(&a, _)| a).collect();
                for a in stale {
                    self.map.remove(&a);
                }
                pos = next;
                it = ItState::default();
                continue;
            }
            let bytes = img.slice_from(pos);
            let mut insn = decode(bytes, pos, it);
            if insn.width == 4 && (img.is_data(pos + 2) || img.is_data(pos + 3) || self.anchors.contains(&(pos + 2))) {
                insn = decode_halfwords(img.read_u16(pos).unwrap_or(0), None, pos, it);
            }
            let same = self.map.get(&pos).is_some_and(|e| e.insn == insn && e.it == it);
            let next_it = if insn.op == Op::It { ItState::from_it(&insn) } else { it.advance() };
            let width = insn.width as u32;
            let stale: Vec<u32> = self.map.range(pos + 1..pos + width).map(|(&a, _)| a).collect();
            for a in stale {
                self.map.remove(&a);
            }
            self.map.insert(pos, Entry { insn, it });
            if same && pos >= through && !it.active() {
                break;
            }
            it = next_it;
            pos += width;
        }
        if pos >= end {
            let stale: Vec<u32> = self.map.range(end..).map(|(&a, _)| a).collect();
            for a in stale {
                self.map.remove(&a);
            }
        }
    }

    fn it_state_at(&self, addr: u32) -> ItState {
        match self.range(..addr).next_back() {
            Some(prev) if prev.end() == addr => {
                let e = &self.map[&prev.address];
                if prev.op == Op::It {
                    ItState::from_it(prev)
                } else {
                    e.it.advance()
                }
            }
            _ => ItState::default(),
        }
    }
}
