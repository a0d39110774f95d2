//! Clang-built samples kept as linked ELF files under `data/sample`.
//!
//! The raw image handed to the analyser is the flattened load image with
//! every header and symbol removed. The ELF symbol table and the call
//! relocations kept by `--emit-relocs` serve as ground truth.

use std::collections::BTreeMap;

use object::elf::{R_ARM_THM_PC22, R_ARM_THM_JUMP24, STT_FUNC};
use object::read::elf::ElfFile32;
use object::{Object, ObjectSection, ObjectSegment, ObjectSymbol, RelocationFlags, RelocationTarget};

pub struct CompiledSample {
    pub name: &'static str,
    pub image: Vec<u8>,
    pub base: u32,
    /// Function symbols by start address (Thumb bit cleared).
    pub functions: BTreeMap<u32, String>,
    /// `bl` and `b.w` sites with the symbol they call.
    pub calls: Vec<(u32, String)>,
}

impl CompiledSample {
    pub fn symbol(&self, name: &str) -> u32 {
        self.functions
            .iter()
            .find(|(_, n)| *n == name)
            .map(|(a, _)| *a)
            .unwrap_or_else(|| panic!("{}: no function {name}", self.name))
    }

    pub fn calls_to(&self, name: &str) -> Vec<u32> {
        self.calls.iter().filter(|(_, n)| n == name).map(|(a, _)| *a).collect()
    }
}

/// Variant name and ELF bytes. Differ in core (v7-M and v6-M) and optimisation level.
pub const VARIANTS: [(&str, &[u8]); 2] = [
    ("m4-o2", include_bytes!("../data/sample/m4-o2.elf")),
    ("m0-os", include_bytes!("../data/sample/m0-os.elf")),
];

pub fn samples() -> Vec<CompiledSample> {
    VARIANTS.iter().map(|(name, elf)| load(name, elf)).collect()
}

pub fn sample(name: &str) -> CompiledSample {
    let (n, elf) = VARIANTS.iter().find(|(n, _)| *n == name).unwrap_or_else(|| panic!("no sample {name}"));
    load(n, elf)
}

fn load(name: &'static str, elf: &[u8]) -> CompiledSample {
    let file = ElfFile32::<object::LittleEndian>::parse(elf).expect("sample ELF parses");
    let base = file.section_by_name(".text").expect(".text").address() as u32;

    let mut chunks = Vec::new();
    for seg in file.segments() {
        let (paddr, data) = (elf_paddr(&file, &seg), seg.data().expect("segment data"));
        if paddr >= base && !data.is_empty() {
            chunks.push((paddr, data));
        }
    }
    let end = chunks.iter().map(|(a, d)| a + d.len() as u32).max().expect("loadable segments");
    let mut image = vec![0xff; (end - base) as usize];
    for (a, d) in chunks {
        let off = (a - base) as usize;
        image[off..off + d.len()].copy_from_slice(d);
    }

    let mut functions = BTreeMap::new();
    for sym in file.symbols() {
        if let object::SymbolFlags::Elf { st_info, .. } = sym.flags() {
            if st_info & 0xf == STT_FUNC && sym.size() > 0 {
                functions.insert(sym.address() as u32 & !1, sym.name().expect("symbol name").to_string());
            }
        }
    }

    let mut calls = Vec::new();
    for section in file.sections() {
        for (offset, rel) in section.relocations() {
            let RelocationFlags::Elf { r_type } = rel.flags() else { continue };
            if r_type != R_ARM_THM_PC22 && r_type != R_ARM_THM_JUMP24 {
                continue;
            }
            let RelocationTarget::Symbol(idx) = rel.target() else { continue };
            let sym = file.symbol_by_index(idx).expect("relocation symbol");
            calls.push((offset as u32, sym.name().expect("symbol name").to_string()));
        }
    }
    calls.sort();
    CompiledSample { name, image, base, functions, calls }
}

fn elf_paddr(file: &ElfFile32<object::LittleEndian>, seg: &object::read::elf::ElfSegment32<object::LittleEndian>) -> u32 {
    use object::read::elf::ProgramHeader;
    seg.elf_program_header().p_paddr(file.endian())
}
