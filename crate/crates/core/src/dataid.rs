//! Inline data identification.
//!
//! Passes run in the order reset-handler segment, PC-relative loads, then
//! table branches, switch helpers and PC-write tables, repeated until no pass
//! changes an annotation.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::diag::{hex, Diagnostic, Stage};
use crate::exec::{access_address, step, Env, Flow, MachineState};
use crate::image::{AnnotateOutcome, Annotation, CodeSource, DataSource, FirmwareImage};
use crate::isa::{Cond, Instruction, Op, Operand, PC};
use crate::listing::{Listing, Reinterpret};

/// Instructions examined when walking back to an index comparison.
pub const WALK_BACK_LIMIT: usize = 16;
/// Entries read from a table whose size could not be bounded by a comparison.
const MAX_UNBOUNDED_ENTRIES: u32 = 256;
const MAX_ROUNDS: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TableKind {
    TableBranch,
    SwitchHelper,
    PcWrite,
}

/// Indirect branch targets recovered from one dispatch site.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchTargetSet {
    #[serde(with = "hex")]
    pub origin: u32,
    pub kind: TableKind,
    /// Sorted and deduplicated.
    #[serde(with = "hex::vec")]
    pub targets: Vec<u32>,
    /// Half-open byte range of the table itself.
    #[serde(with = "hex::vec")]
    pub table: Vec<u32>,
    /// False when the table size was not bounded by a comparison.
    pub bounded: bool,
}

impl BranchTargetSet {
    fn new(origin: u32, kind: TableKind, mut targets: Vec<u32>, table: (u32, u32), bounded: bool) -> Self {
        targets.sort_unstable();
        targets.dedup();
        BranchTargetSet { origin, kind, targets, table: vec![table.0, table.1], bounded }
    }

    pub fn max_target(&self) -> Option<u32> {
        self.targets.last().copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HelperRule {
    GnuUqi,
    GnuSqi,
    GnuUhi,
    GnuShi,
    KeilSwitch8,
}

/// A compact switch helper recognised by its leading bytes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HelperSignature {
    pub name: String,
    /// Space-separated hex bytes; `??` matches any byte.
    pub prologue: String,
    pub rule: HelperRule,
}

impl HelperSignature {
    pub fn pattern(&self) -> Result<Vec<Option<u8>>, String> {
        self.prologue
            .split_whitespace()
            .map(|t| match t {
                "??" => Ok(None),
                _ => u8::from_str_radix(t, 16).map(Some).map_err(|_| format!("{}: bad byte {t:?}", self.name)),
            })
            .collect()
    }

    fn matches_at(&self, img: &FirmwareImage, addr: u32) -> bool {
        let Ok(pat) = self.pattern() else { return false };
        !pat.is_empty()
            && pat.iter().enumerate().all(|(i, p)| match (p, img.read_u8(addr + i as u32)) {
                (_, None) => false,
                (None, Some(_)) => true,
                (Some(p), Some(b)) => *p == b,
            })
    }
}

pub fn parse_helper_pack(json: &str) -> Result<Vec<HelperSignature>, String> {
    let sigs: Vec<HelperSignature> = serde_json::from_str(json).map_err(|e| e.to_string())?;
    for s in &sigs {
        s.pattern()?;
    }
    Ok(sigs)
}

pub fn builtin_helpers() -> Vec<HelperSignature> {
    parse_helper_pack(include_str!("../data/switch_helpers.json")).expect("built-in helper pack")
}

/// Outcome of inline data identification.
#[derive(Debug, Clone, Default, Serialize)]
pub struct DataId {
    /// `.data` initialisers copied by the reset handler, as `[start, end)`.
    pub data_segment: Option<(u32, u32)>,
    pub target_sets: Vec<BranchTargetSet>,
    /// Located switch helpers as (name, address).
    pub helpers: Vec<(String, u32)>,
    pub diagnostics: Vec<Diagnostic>,
    pub rounds: usize,
}

impl DataId {
    /// Every recovered indirect target.
    pub fn all_targets(&self) -> BTreeSet<u32> {
        self.target_sets.iter().flat_map(|s| s.targets.iter().copied()).collect()
    }
}

/// Results accumulated across scan passes.
#[derive(Debug, Default)]
pub struct ScanState {
    sets: BTreeMap<u32, BranchTargetSet>,
    diags: BTreeSet<Diagnostic>,
    helpers: BTreeMap<u32, HelperSignature>,
}

impl ScanState {
    fn diag(&mut self, kind: &str, address: u32, message: impl Into<String>) {
        self.diags.insert(Diagnostic::new(Stage::DataId, kind, Some(address), message));
    }

    fn conflicts(&mut self, out: &AnnotateOutcome) {
        if let Some(first) = out.conflicts.first() {
            let describe = |a: &Annotation| match a {
                Annotation::Data(s) => format!("{s:?}"),
                Annotation::Code(s) => format!("code ({s:?})"),
                Annotation::Unknown => "unknown".into(),
            };
            let msg = format!(
                "{} byte(s) already {}, requested {}",
                out.conflicts.len(),
                describe(&first.existing),
                describe(&first.requested)
            );
            self.diag("annotation_conflict", first.address, msg);
        }
    }

    /// A table that would swallow one of its own targets or a helper's entry
    /// point comes from a corrupt count; annotating it would erase the code
    /// that justified it.
    fn plausible_table(&mut self, origin: u32, (start, end): (u32, u32), targets: &[u32]) -> bool {
        let inside = |a: &u32| (start..end).contains(a);
        let why = match (targets.iter().find(|a| inside(a)), self.helpers.keys().find(|a| inside(a))) {
            (Some(t), _) => format!("table 0x{start:x}..0x{end:x} contains its own target 0x{t:x}"),
            (None, Some(h)) => format!("table 0x{start:x}..0x{end:x} covers the helper at 0x{h:x}"),
            (None, None) => return true,
        };
        self.diag("implausible_table", origin, why);
        false
    }

    fn mark_data(&mut self, img: &mut FirmwareImage, listing: &mut Listing, addr: u32, len: u32, src: DataSource) -> bool {
        let out = listing.reinterpret(img, addr, len, Reinterpret::Data(src));
        self.conflicts(&out);
        out.changed
    }

    fn mark_targets(&mut self, img: &mut FirmwareImage, listing: &mut Listing, targets: &[u32]) -> bool {
        let mut changed = false;
        for &t in targets {
            let out = listing.reinterpret(img, t, 2, Reinterpret::Code(CodeSource::BranchTarget));
            self.conflicts(&out);
            changed |= out.changed;
        }
        changed
    }
}

/// Runs all passes to a fixpoint.
pub fn identify_inline_data(img: &mut FirmwareImage, listing: &mut Listing, helpers: &[HelperSignature]) -> DataId {
    let mut ctx = ScanState::default();
    let vt_len = img.vector_table_len() as u32 * 4;
    let out = img.annotate_vector_table();
    ctx.conflicts(&out);
    listing.resync(img, img.code_base(), img.code_base() + vt_len);

    let data_segment = img.reset_handler().and_then(|r| find_data_segment(img, listing, r));
    if let Some((start, end)) = data_segment {
        ctx.mark_data(img, listing, start, end - start, DataSource::ResetHandlerSegment);
    }

    let mut rounds = 0;
    loop {
        rounds += 1;
        let mut changed = scan_pc_relative_loads(img, listing, &mut ctx);
        changed |= scan_table_branches(img, listing, &mut ctx);
        changed |= scan_switch_helpers(img, listing, helpers, &mut ctx);
        changed |= scan_pc_writes(img, listing, &mut ctx);
        if !changed {
            break;
        }
        if rounds == MAX_ROUNDS {
            ctx.diag("no_fixpoint", img.code_base(), format!("annotations still changing after {MAX_ROUNDS} rounds"));
            break;
        }
    }

    for set in ctx.sets.values() {
        for &t in &set.targets {
            if listing.get(t).is_none_or(|i| i.is_invalid()) {
                let msg = format!("target of 0x{:x} does not decode", set.origin);
                ctx.diags.insert(Diagnostic::new(Stage::DataId, "bad_branch_target", Some(t), msg));
            }
        }
    }

    DataId {
        data_segment,
        target_sets: ctx.sets.into_values().collect(),
        helpers: ctx.helpers.into_iter().map(|(a, s)| (s.name, a)).collect(),
        diagnostics: ctx.diags.into_iter().collect(),
        rounds,
    }
}

/// Reset handler instructions examined for the `.data` copy triplet.
const RESET_SCAN_LIMIT: usize = 48;

/// Finds the `.data` initialiser region from the reset handler's literal
/// triplet (text end, data start, data end). Does not annotate.
pub fn find_data_segment(img: &FirmwareImage, listing: &Listing, reset: u32) -> Option<(u32, u32)> {
    let mut runs: Vec<Vec<u32>> = vec![Vec::new()];
    let mut pos = reset;
    for _ in 0..RESET_SCAN_LIMIT {
        let Some(insn) = listing.get(pos) else { break };
        match insn.literal() {
            Some((addr, 4)) if insn.op == Op::Ldr => match img.read_u32(addr) {
                Some(v) => runs.last_mut().unwrap().push(v),
                None => runs.push(Vec::new()),
            },
            _ => {
                if !runs.last().unwrap().is_empty() {
                    runs.push(Vec::new());
                }
            }
        }
        if insn.is_return() || (insn.op == Op::B && !insn.is_conditional() && insn.target() <= Some(insn.address)) {
            break;
        }
        pos = insn.end();
    }
    let end = img.end();
    runs.iter().flat_map(|r| r.windows(3)).find_map(|w| {
        let (text_end, data_start, data_end) = (w[0], w[1], w[2]);
        let shaped = text_end > img.code_base()
            && text_end < end
            && data_start <= data_end
            && !img.contains(data_start)
            && !img.contains(data_end.saturating_sub(1))
            && data_end - data_start <= end - text_end;
        shaped.then_some((text_end, end))
    })
}

/// Annotates literal pool entries addressed by PC-relative loads.
pub fn scan_pc_relative_loads(img: &mut FirmwareImage, listing: &mut Listing, ctx: &mut ScanState) -> bool {
    let mut changed = false;
    let mut pos = img.code_base();
    loop {
        let Some(insn) = listing.range(pos..).find(|i| i.literal().is_some()).cloned() else { break };
        pos = insn.end();
        let (addr, size) = insn.literal().unwrap();
        if !img.contains(addr) || !img.contains(addr + size - 1) {
            log::warn!("literal at 0x{addr:x} loaded by 0x{:x} lies outside the image", insn.address);
            continue;
        }
        changed |= ctx.mark_data(img, listing, addr, size, DataSource::PcRelativeLoad);
    }
    changed
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BoundError {
    NoComparison,
    RegisterMismatch(u8),
}

/// Highest index admitted by the comparison guarding a dispatch at `at`.
fn index_bound(listing: &Listing, at: u32, index: Option<u8>) -> Result<(u8, u32), BoundError> {
    let back = listing.preceding(at, WALK_BACK_LIMIT);
    let mut branch_cond: Option<Cond> = None;
    for insn in back {
        if insn.is_return() || (insn.op == Op::B && !insn.is_conditional()) || insn.op == Op::Bl {
            break;
        }
        if insn.op == Op::B {
            branch_cond = insn.cond;
            continue;
        }
        if insn.op == Op::Cmp {
            let (Some(reg), Some(Operand::Imm(n))) = (insn.reg(0), insn.operands.get(1)) else {
                return Err(BoundError::NoComparison);
            };
            if index.is_some_and(|i| i != reg) {
                return Err(BoundError::RegisterMismatch(reg));
            }
            let n = *n as u32;
            let max = match branch_cond {
                Some(Cond::CS) | Some(Cond::CC) => match n.checked_sub(1) {
                    Some(m) => m,
                    None => return Err(BoundError::NoComparison),
                },
                _ => n,
            };
            return Ok((reg, max));
        }
    }
    Err(BoundError::NoComparison)
}

fn bound_message(e: BoundError, expected: Option<u8>) -> String {
    match (e, expected) {
        (BoundError::RegisterMismatch(r), Some(i)) => format!("comparison uses r{r}, dispatch indexes r{i}"),
        _ => format!("no index comparison within {WALK_BACK_LIMIT} instructions"),
    }
}

/// First code-annotated address at or after `from`.
fn next_known_code(img: &FirmwareImage, from: u32) -> Option<u32> {
    (from..img.end()).find(|&a| matches!(img.annotation(a), Annotation::Code(_)))
}

#[derive(Debug, Clone, Copy)]
struct TableShape {
    /// Address of the first entry.
    entries: u32,
    esize: u32,
    signed: bool,
    /// Entry `e` dispatches to `target_base + 2 * e`.
    target_base: u32,
}

impl TableShape {
    fn entry(&self, img: &FirmwareImage, i: u32) -> Option<i64> {
        let a = self.entries + i * self.esize;
        Some(match (self.esize, self.signed) {
            (1, false) => img.read_u8(a)? as i64,
            (1, true) => img.read_u8(a)? as i8 as i64,
            (_, false) => img.read_u16(a)? as i64,
            (_, true) => img.read_u16(a)? as i16 as i64,
        })
    }

    fn target(&self, img: &FirmwareImage, i: u32) -> Option<u32> {
        let t = (self.target_base as i64 + 2 * self.entry(img, i)?) as u32;
        img.contains(t).then_some(t)
    }

    /// Targets of a table with `count` entries.
    fn targets(&self, img: &FirmwareImage, count: u32) -> Vec<u32> {
        (0..count).filter_map(|i| self.target(img, i)).collect()
    }

    /// Entry count when no comparison bounds the table: stop at the first
    /// known code address or the lowest forward target seen.
    fn conservative_count(&self, img: &FirmwareImage) -> u32 {
        let mut limit = next_known_code(img, self.entries).unwrap_or(img.end());
        let mut n = 0;
        while n < MAX_UNBOUNDED_ENTRIES && self.entries + (n + 1) * self.esize <= limit {
            match self.target(img, n) {
                Some(t) if t >= self.entries => {
                    limit = limit.min(t);
                    if self.entries + (n + 1) * self.esize > limit {
                        break;
                    }
                }
                _ => break,
            }
            n += 1;
        }
        n
    }
}

fn even(n: u32) -> u32 {
    (n + 1) & !1
}

/// Annotates `tbb`/`tbh` tables and records their targets.
pub fn scan_table_branches(img: &mut FirmwareImage, listing: &mut Listing, ctx: &mut ScanState) -> bool {
    let sites: Vec<Instruction> =
        listing.iter().filter(|i| matches!(i.op, Op::Tbb | Op::Tbh) && !ctx.sets.contains_key(&i.address)).cloned().collect();
    let mut changed = false;
    for insn in sites {
        if listing.get(insn.address) != Some(&insn) {
            continue;
        }
        let m = insn.mem().unwrap();
        let Some((index, _)) = m.index else { continue };
        if m.base != PC {
            ctx.diag("table_branch_base", insn.address, "table base is not pc");
            continue;
        }
        let esize = if insn.op == Op::Tbh { 2 } else { 1 };
        let pc = insn.address + 4;
        let shape = TableShape { entries: pc, esize, signed: false, target_base: pc };
        let (count, bounded) = match index_bound(listing, insn.address, Some(index)) {
            Ok((_, max)) => (max + 1, true),
            Err(e) => {
                ctx.diag("table_unbounded", insn.address, bound_message(e, Some(index)));
                (shape.conservative_count(img), false)
            }
        };
        if count == 0 {
            continue;
        }
        let len = even(count * esize);
        let targets = shape.targets(img, count);
        if !ctx.plausible_table(insn.address, (pc, pc + len), &targets) {
            continue;
        }
        ctx.mark_data(img, listing, pc, len, DataSource::TableBranch);
        ctx.mark_targets(img, listing, &targets);
        let set = BranchTargetSet::new(insn.address, TableKind::TableBranch, targets, (pc, pc + len), bounded);
        ctx.sets.insert(insn.address, set);
        changed = true;
    }
    changed
}

/// Locates switch helpers by signature and annotates the inline tables
/// following each call to them.
pub fn scan_switch_helpers(
    img: &mut FirmwareImage,
    listing: &mut Listing,
    sigs: &[HelperSignature],
    ctx: &mut ScanState,
) -> bool {
    for insn in listing.iter() {
        if ctx.helpers.contains_key(&insn.address) {
            continue;
        }
        if let Some(sig) = sigs.iter().find(|s| s.matches_at(img, insn.address)) {
            ctx.helpers.insert(insn.address, sig.clone());
        }
    }
    let calls: Vec<(Instruction, HelperSignature)> = listing
        .iter()
        .filter(|i| i.op == Op::Bl && !ctx.sets.contains_key(&i.address))
        .filter_map(|i| ctx.helpers.get(&i.target()?).map(|s| (i.clone(), s.clone())))
        .collect();
    let mut changed = false;
    for (call, sig) in calls {
        if listing.get(call.address) != Some(&call) {
            continue;
        }
        let t = call.end();
        let (shape, count, len, bounded) = match sig.rule {
            HelperRule::KeilSwitch8 => {
                let Some(n) = img.read_u8(t) else { continue };
                let count = n as u32 + 1;
                let shape = TableShape { entries: t + 1, esize: 1, signed: false, target_base: t };
                (shape, count, even(1 + count), true)
            }
            rule => {
                let (esize, signed) = match rule {
                    HelperRule::GnuUqi => (1, false),
                    HelperRule::GnuSqi => (1, true),
                    HelperRule::GnuUhi => (2, false),
                    _ => (2, true),
                };
                let shape = TableShape { entries: t, esize, signed, target_base: t };
                let (count, bounded) = match index_bound(listing, call.address, Some(0)) {
                    Ok((_, max)) => (max + 1, true),
                    Err(e) => {
                        ctx.diag("table_unbounded", call.address, bound_message(e, Some(0)));
                        (shape.conservative_count(img), false)
                    }
                };
                (shape, count, even(count * esize), bounded)
            }
        };
        if count == 0 {
            ctx.diag("helper_table_empty", call.address, format!("call to {} has no table", sig.name));
            continue;
        }
        let targets = shape.targets(img, count);
        if !ctx.plausible_table(call.address, (t, t + len), &targets) {
            continue;
        }
        ctx.mark_data(img, listing, t, len, DataSource::SwitchHelper);
        ctx.mark_targets(img, listing, &targets);
        let set = BranchTargetSet::new(call.address, TableKind::SwitchHelper, targets, (t, t + len), bounded);
        ctx.sets.insert(call.address, set);
        changed = true;
    }
    changed
}

fn is_computed_pc_write(insn: &Instruction) -> bool {
    match insn.op {
        Op::Mov | Op::Add => insn.reg(0) == Some(PC) && matches!(insn.operands.get(1), Some(Operand::Reg(r)) if *r != PC),
        Op::Ldr => insn.reg(0) == Some(PC) && insn.literal().is_none(),
        _ => false,
    }
}

/// Recovers tables read by computed writes to pc by executing the dispatch
/// slice for every admissible index value.
pub fn scan_pc_writes(img: &mut FirmwareImage, listing: &mut Listing, ctx: &mut ScanState) -> bool {
    let sites: Vec<Instruction> =
        listing.iter().filter(|i| is_computed_pc_write(i) && !ctx.sets.contains_key(&i.address)).cloned().collect();
    let mut changed = false;
    for w in sites {
        let (reg, max) = match index_bound(listing, w.address, None) {
            Ok(b) => b,
            Err(e) => {
                ctx.diag("pc_write_unbounded", w.address, bound_message(e, None));
                continue;
            }
        };
        // The slice starts after the bounding branch, or after the comparison.
        let back = listing.preceding(w.address, WALK_BACK_LIMIT);
        let Some(start) = back
            .iter()
            .find(|i| i.op == Op::B || i.op == Op::Cmp)
            .map(|i| i.end())
        else {
            continue;
        };
        let slice: Vec<Instruction> = listing.range(start..=w.address).cloned().collect();
        let mut loads: BTreeSet<(u32, u32)> = BTreeSet::new();
        let mut targets = Vec::new();
        let mut failed = None;
        for v in 0..=max {
            let mut st = MachineState::new();
            st.regs[reg as usize] = Some(v);
            let env = Env::new(img);
            for insn in &slice {
                if insn.op.is_load() && insn.literal().is_none() {
                    if let (Some(a), Some(size)) = (access_address(&st, insn), insn.op.access_size()) {
                        if img.contains(a) {
                            loads.insert((a, size));
                        }
                    }
                }
                match step(&mut st, insn, &env) {
                    Ok(Flow::Next) if insn.address != w.address => {}
                    Ok(Flow::Indirect(Some(t))) if insn.address == w.address && img.contains(t) => targets.push(t),
                    other => {
                        failed = Some(format!("index {v}: {other:?} at 0x{:x}", insn.address));
                        break;
                    }
                }
            }
            if failed.is_some() {
                break;
            }
        }
        if let Some(msg) = failed {
            ctx.diag("pc_write_slice", w.address, msg);
            continue;
        }
        let (lo, hi) = match (loads.first(), loads.last()) {
            (Some(f), Some(l)) => (f.0, l.0 + l.1),
            _ => {
                ctx.diag("pc_write_slice", w.address, "no table load in dispatch slice");
                continue;
            }
        };
        for (a, size) in &loads {
            ctx.mark_data(img, listing, *a, *size, DataSource::PcWriteTable);
        }
        ctx.mark_targets(img, listing, &targets);
        ctx.sets.insert(w.address, BranchTargetSet::new(w.address, TableKind::PcWrite, targets, (lo, hi), true));
        changed = true;
    }
    changed
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_pack_parses() {
        let sigs = builtin_helpers();
        assert_eq!(sigs.len(), 5);
        assert!(sigs.iter().all(|s| s.pattern().unwrap().len() >= 10));
    }

    #[test]
    fn wildcard_pattern() {
        let s = HelperSignature { name: "x".into(), prologue: "02 ?? 71".into(), rule: HelperRule::GnuUqi };
        assert_eq!(s.pattern().unwrap(), vec![Some(2), None, Some(0x71)]);
        let bad = HelperSignature { prologue: "zz".into(), ..s };
        assert!(bad.pattern().is_err());
    }
}
