//! Raw firmware images: vector table, code base and byte annotations.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::Serialize;

use crate::isa::{Instruction, Op};

/// Minimum image size: sixteen vector table words.
pub const MIN_IMAGE_LEN: usize = 64;

/// Word slots holding the core exception handlers.
pub const CORE_HANDLER_SLOTS: [usize; 8] = [1, 2, 3, 4, 5, 6, 14, 15];

const MAX_VT_SLOTS: usize = 256;

#[derive(Debug, thiserror::Error)]
pub enum ImageError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("image is {0} bytes, too small for a vector table")]
    TooSmall(usize),
    #[error("vector table holds no usable handler entry")]
    NoHandlers,
    #[error("no self-targeting branch found")]
    NoSelfBranch,
    #[error("no self-targeting branch matches a vector table handler")]
    NoMatchingBranch,
    #[error("every candidate code base is negative")]
    NegativeBase,
    #[error("code base 0x{0:x} is not word aligned")]
    Misaligned(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct VectorEntry {
    pub index: usize,
    pub raw_value: u32,
    pub handler_address: u32,
    /// Non-zero with the Thumb bit set.
    pub is_handler: bool,
}

/// Where a data annotation came from. Higher rank wins conflicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    VectorTable,
    ResetHandlerSegment,
    PcRelativeLoad,
    TableBranch,
    SwitchHelper,
    PcWriteTable,
}

impl DataSource {
    pub fn rank(self) -> u8 {
        match self {
            DataSource::VectorTable => 4,
            DataSource::ResetHandlerSegment => 3,
            DataSource::PcRelativeLoad => 2,
            DataSource::TableBranch | DataSource::SwitchHelper | DataSource::PcWriteTable => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CodeSource {
    /// Residual halfword of a partially consumed literal slot.
    Residual,
    /// Indirect branch target recovered from a table.
    BranchTarget,
    Handler,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "source")]
pub enum Annotation {
    #[default]
    Unknown,
    Code(CodeSource),
    Data(DataSource),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Conflict {
    pub address: u32,
    pub existing: Annotation,
    pub requested: Annotation,
}

#[derive(Debug, Default)]
pub struct AnnotateOutcome {
    pub changed: bool,
    pub conflicts: Vec<Conflict>,
}

impl AnnotateOutcome {
    fn merge(&mut self, other: AnnotateOutcome) {
        self.changed |= other.changed;
        self.conflicts.extend(other.conflicts);
    }
}

#[derive(Clone)]
pub struct FirmwareImage {
    bytes: Vec<u8>,
    code_base: u32,
    annotations: Vec<Annotation>,
}

impl fmt::Debug for FirmwareImage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FirmwareImage")
            .field("len", &self.bytes.len())
            .field("code_base", &format_args!("0x{:x}", self.code_base))
            .finish()
    }
}

pub fn load_image(path: &Path) -> Result<FirmwareImage, ImageError> {
    let bytes = std::fs::read(path).map_err(|source| ImageError::Io {
        path: path.display().to_string(),
        source,
    })?;
    FirmwareImage::from_bytes(bytes)
}

impl FirmwareImage {
    pub fn from_bytes(bytes: Vec<u8>) -> Result<Self, ImageError> {
        if bytes.len() < MIN_IMAGE_LEN {
            return Err(ImageError::TooSmall(bytes.len()));
        }
        let annotations = vec![Annotation::Unknown; bytes.len()];
        Ok(FirmwareImage { bytes, code_base: 0, annotations })
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    pub fn code_base(&self) -> u32 {
        self.code_base
    }

    pub fn end(&self) -> u32 {
        self.code_base.wrapping_add(self.bytes.len() as u32)
    }

    pub fn contains(&self, addr: u32) -> bool {
        addr >= self.code_base && addr < self.end()
    }

    pub fn offset(&self, addr: u32) -> Option<usize> {
        self.contains(addr).then(|| (addr - self.code_base) as usize)
    }

    /// Bytes from `addr` to the end of the image.
    pub fn slice_from(&self, addr: u32) -> &[u8] {
        self.offset(addr).map_or(&[], |o| &self.bytes[o..])
    }

    pub fn read_u8(&self, addr: u32) -> Option<u8> {
        self.offset(addr).map(|o| self.bytes[o])
    }

    pub fn read_u16(&self, addr: u32) -> Option<u16> {
        Some(u16::from_le_bytes([self.read_u8(addr)?, self.read_u8(addr.wrapping_add(1))?]))
    }

    pub fn read_u32(&self, addr: u32) -> Option<u32> {
        let o = self.offset(addr)?;
        let b = self.bytes.get(o..o + 4)?;
        Some(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    /// Shifts the address space; annotations are offset-keyed and move with it.
    pub fn rebase(&mut self, base: u32) -> Result<(), ImageError> {
        if base % 4 != 0 {
            return Err(ImageError::Misaligned(base));
        }
        self.code_base = base;
        Ok(())
    }

    fn word_at_offset(&self, off: usize) -> Option<u32> {
        let b = self.bytes.get(off..off + 4)?;
        Some(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn entry(&self, index: usize) -> Option<VectorEntry> {
        let raw = self.word_at_offset(index * 4)?;
        Some(VectorEntry {
            index,
            raw_value: raw,
            handler_address: raw & !1,
            is_handler: raw != 0 && raw & 1 == 1,
        })
    }

    /// Entries for the core handler slots.
    pub fn read_vector_table(&self) -> Vec<VectorEntry> {
        CORE_HANDLER_SLOTS.iter().filter_map(|&i| self.entry(i)).collect()
    }

    pub fn reset_handler(&self) -> Option<u32> {
        self.entry(1).filter(|e| e.is_handler && self.contains(e.handler_address)).map(|e| e.handler_address)
    }

    /// Number of vector table words, including device interrupts.
    ///
    /// The table continues while words are zero or point at Thumb code inside
    /// the image, and never extends past the lowest handler it lists.
    pub fn vector_table_len(&self) -> usize {
        let mut lowest = self.bytes.len();
        for i in 1..16 {
            if let Some(e) = self.entry(i) {
                if e.is_handler {
                    if let Some(o) = self.offset(e.handler_address) {
                        lowest = lowest.min(o);
                    }
                }
            }
        }
        let mut n = 16;
        while n < MAX_VT_SLOTS && (n + 1) * 4 <= lowest {
            let Some(e) = self.entry(n) else { break };
            let ok = e.raw_value == 0 || (e.is_handler && self.contains(e.handler_address));
            if !ok {
                break;
            }
            if let Some(o) = self.offset(e.handler_address).filter(|_| e.is_handler) {
                lowest = lowest.min(o);
            }
            n += 1;
        }
        n
    }

    /// Distinct in-image handler addresses from the whole vector table.
    pub fn handler_addresses(&self) -> Vec<u32> {
        let mut v: Vec<u32> = (1..self.vector_table_len())
            .filter_map(|i| self.entry(i))
            .filter(|e| e.is_handler && self.contains(e.handler_address))
            .map(|e| e.handler_address)
            .collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    pub fn annotation(&self, addr: u32) -> Annotation {
        self.offset(addr).map_or(Annotation::Unknown, |o| self.annotations[o])
    }

    pub fn is_data(&self, addr: u32) -> bool {
        matches!(self.annotation(addr), Annotation::Data(_))
    }

    pub fn annotate_data(&mut self, addr: u32, len: u32, source: DataSource) -> AnnotateOutcome {
        let mut out = AnnotateOutcome::default();
        for a in addr..addr.saturating_add(len) {
            let Some(o) = self.offset(a) else { break };
            let requested = Annotation::Data(source);
            match self.annotations[o] {
                Annotation::Unknown | Annotation::Code(_) => {
                    self.annotations[o] = requested;
                    out.changed = true;
                }
                Annotation::Data(existing) if existing == source => {}
                Annotation::Data(existing) => {
                    if existing.rank() < source.rank() {
                        self.annotations[o] = requested;
                        out.changed = true;
                    }
                    out.conflicts.push(Conflict { address: a, existing: Annotation::Data(existing), requested });
                }
            }
        }
        out
    }

    /// Marks `len` bytes as code; bytes already annotated data are left alone
    /// and reported.
    pub fn annotate_code(&mut self, addr: u32, len: u32, source: CodeSource) -> AnnotateOutcome {
        let mut out = AnnotateOutcome::default();
        for a in addr..addr.saturating_add(len) {
            let Some(o) = self.offset(a) else { break };
            match self.annotations[o] {
                Annotation::Unknown => {
                    self.annotations[o] = Annotation::Code(source);
                    out.changed = true;
                }
                Annotation::Code(_) => {}
                existing @ Annotation::Data(_) => {
                    out.conflicts.push(Conflict { address: a, existing, requested: Annotation::Code(source) })
                }
            }
        }
        out
    }

    /// Marks the vector table itself as data.
    pub fn annotate_vector_table(&mut self) -> AnnotateOutcome {
        let len = self.vector_table_len() as u32 * 4;
        let mut out = self.annotate_data(self.code_base, len, DataSource::VectorTable);
        for h in self.handler_addresses() {
            out.merge(self.annotate_code(h, 2, CodeSource::Handler));
        }
        out
    }

    /// Maximal runs of data bytes as `(start, end)` half-open ranges with their source.
    pub fn data_ranges(&self) -> Vec<(u32, u32, DataSource)> {
        let mut out: Vec<(u32, u32, DataSource)> = Vec::new();
        for (o, ann) in self.annotations.iter().enumerate() {
            if let Annotation::Data(src) = ann {
                let a = self.code_base + o as u32;
                match out.last_mut() {
                    Some(last) if last.1 == a && last.2 == *src => last.1 = a + 1,
                    _ => out.push((a, a + 1, *src)),
                }
            }
        }
        out
    }

    /// Set of data byte addresses.
    pub fn data_bytes(&self) -> Vec<u32> {
        (0..self.bytes.len())
            .filter(|&o| matches!(self.annotations[o], Annotation::Data(_)))
            .map(|o| self.code_base + o as u32)
            .collect()
    }

    /// End address (exclusive) of the data run starting at `addr`.
    pub fn data_run_end(&self, addr: u32) -> u32 {
        let mut a = addr;
        while self.is_data(a) {
            a += 1;
        }
        a
    }
}

/// Result of code base recovery.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CodeBase {
    pub base: u32,
    /// Matching (handler, self-branch) pairs behind the chosen base.
    pub support: usize,
    /// Other candidates with their support.
    pub alternatives: Vec<(u32, usize)>,
    pub ambiguous: bool,
}

/// Recovers the load address from self-branches and vector table handlers.
///
/// `instrs` is a sweep of the image at its current base.
pub fn identify_code_base(img: &FirmwareImage, instrs: &[Instruction]) -> Result<CodeBase, ImageError> {
    let handlers: Vec<u32> = img
        .read_vector_table()
        .into_iter()
        .filter(|e| e.is_handler)
        .map(|e| e.handler_address)
        .collect();
    if handlers.is_empty() {
        return Err(ImageError::NoHandlers);
    }
    let self_branches: Vec<u32> = instrs
        .iter()
        .filter(|i| i.op == Op::B && i.target() == Some(i.address))
        .map(|i| i.address - img.code_base())
        .collect();
    if self_branches.is_empty() {
        return Err(ImageError::NoSelfBranch);
    }
    let mut votes: BTreeMap<u32, usize> = BTreeMap::new();
    let mut saw_negative = false;
    for &h in &handlers {
        for &off in &self_branches {
            if h & 0xfff != off & 0xfff {
                continue;
            }
            if h < off {
                saw_negative = true;
                continue;
            }
            let base = h - off;
            if base % 0x1000 != 0 || base.checked_add(img.len() as u32).is_none() {
                continue;
            }
            *votes.entry(base).or_default() += 1;
        }
    }
    if votes.is_empty() {
        return Err(if saw_negative { ImageError::NegativeBase } else { ImageError::NoMatchingBranch });
    }
    let best = *votes.values().max().unwrap();
    let winners: Vec<u32> = votes.iter().filter(|(_, &v)| v == best).map(|(&b, _)| b).collect();
    let base = winners[0];
    let ambiguous = winners.len() > 1;
    if ambiguous {
        log::warn!("code base candidates {:x?} tie with {best} votes; using 0x{base:x}", winners);
    }
    Ok(CodeBase {
        base,
        support: best,
        alternatives: votes.into_iter().filter(|&(b, _)| b != base).collect(),
        ambiguous,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::sweep;

    fn image_with(words: &[(usize, u32)], len: usize) -> FirmwareImage {
        let mut bytes = vec![0u8; len];
        for &(off, w) in words {
            bytes[off..off + 4].copy_from_slice(&w.to_le_bytes());
        }
        FirmwareImage::from_bytes(bytes).unwrap()
    }

    #[test]
    fn zero_image_loads() {
        let img = FirmwareImage::from_bytes(vec![0; 64]).unwrap();
        assert_eq!((img.len(), img.code_base()), (64, 0));
        assert!(matches!(FirmwareImage::from_bytes(vec![0; 63]), Err(ImageError::TooSmall(63))));
    }

    #[test]
    fn vector_entries() {
        let img = image_with(&[(4, 0x0001_b2c1), (8, 0)], 0x400);
        let vt = img.read_vector_table();
        assert_eq!(vt.len(), 8);
        assert_eq!(vt[0].handler_address, 0x0001_b2c0);
        assert!(vt[0].is_handler);
        assert!(!vt[1].is_handler);
    }

    #[test]
    fn fixture_base_from_default_handler() {
        // Slot 1 points at 0x1b2c1; `b .` (0xe7fe) sits at file offset 0x2c0.
        let mut img = image_with(&[(4, 0x0001_b2c1)], 0x400);
        let mut bytes = img.bytes().to_vec();
        bytes[0x2c0..0x2c2].copy_from_slice(&0xe7feu16.to_le_bytes());
        img = FirmwareImage::from_bytes(bytes).unwrap();
        let cb = identify_code_base(&img, &sweep(img.bytes(), 0)).unwrap();
        assert_eq!(cb.base, 0x1b000);
        img.rebase(cb.base).unwrap();
        let again = identify_code_base(&img, &sweep(img.bytes(), img.code_base())).unwrap();
        assert_eq!(again.base, img.code_base());
    }

    #[test]
    fn no_handlers_fails_fast() {
        let img = FirmwareImage::from_bytes(vec![0; 128]).unwrap();
        assert!(matches!(identify_code_base(&img, &[]), Err(ImageError::NoHandlers)));
    }

    #[test]
    fn precedence() {
        let mut img = FirmwareImage::from_bytes(vec![0; 64]).unwrap();
        img.annotate_data(0x10, 4, DataSource::TableBranch);
        let out = img.annotate_data(0x10, 2, DataSource::PcRelativeLoad);
        assert!(out.changed);
        assert_eq!(img.annotation(0x10), Annotation::Data(DataSource::PcRelativeLoad));
        let out = img.annotate_data(0x10, 1, DataSource::PcWriteTable);
        assert!(!out.changed);
        assert_eq!(out.conflicts.len(), 1);
        let out = img.annotate_code(0x12, 2, CodeSource::Residual);
        assert_eq!(out.conflicts.len(), 2);
        assert!(img.is_data(0x12));
    }
}
