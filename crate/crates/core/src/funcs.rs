//! Function block estimation, cross-references, call depth and deny-listing.

use std::collections::{BTreeMap, BTreeSet};

use petgraph::algo::tarjan_scc;
use petgraph::graph::{DiGraph, NodeIndex};
use serde::{Deserialize, Serialize};

use crate::dataid::BranchTargetSet;
use crate::diag::{hex, Diagnostic, Stage};
use crate::image::FirmwareImage;
use crate::isa::{Instruction, Op};
use crate::listing::Listing;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunctionBlock {
    #[serde(with = "hex")]
    pub start: u32,
    /// Exclusive; the final exit instruction is inside the block.
    #[serde(with = "hex")]
    pub end: u32,
    /// Call sites targeting this block.
    #[serde(with = "hex::vec")]
    pub xrefs_in: Vec<u32>,
    /// Starts of blocks this block transfers to.
    #[serde(with = "hex::vec")]
    pub xrefs_out: Vec<u32>,
    pub call_depth: u32,
    pub deny_listed: bool,
    /// No exit survived; the block runs into the next start.
    pub fallthrough: bool,
}

impl FunctionBlock {
    pub fn contains(&self, addr: u32) -> bool {
        (self.start..self.end).contains(&addr)
    }
}

/// Estimated function blocks, ordered by start address.
#[derive(Debug, Clone, Default, Serialize)]
pub struct Functions {
    pub blocks: Vec<FunctionBlock>,
    #[serde(skip)]
    pub diagnostics: Vec<Diagnostic>,
}

impl Functions {
    pub fn containing(&self, addr: u32) -> Option<&FunctionBlock> {
        let i = self.blocks.partition_point(|b| b.start <= addr);
        self.blocks[..i].last().filter(|b| b.contains(addr))
    }

    pub fn by_start(&self, start: u32) -> Option<&FunctionBlock> {
        self.blocks.binary_search_by_key(&start, |b| b.start).ok().map(|i| &self.blocks[i])
    }

    pub fn starts(&self) -> Vec<u32> {
        self.blocks.iter().map(|b| b.start).collect()
    }

    /// Debug dump used for comparing against symbol tables.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.blocks).expect("blocks serialise")
    }
}

/// Seeds in order of strength.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Seed {
    Discovered,
    Table,
    Branch,
    Call,
    Handler,
}

impl Seed {
    /// Seeds that a switch-table merge may not remove.
    fn pinned(self) -> bool {
        self >= Seed::Call
    }
}

fn add_seed(seeds: &mut BTreeMap<u32, Seed>, addr: u32, kind: Seed) {
    let e = seeds.entry(addr).or_insert(kind);
    *e = (*e).max(kind);
}

fn seed_map(img: &FirmwareImage, listing: &Listing, tables: &[BranchTargetSet]) -> BTreeMap<u32, Seed> {
    let mut seeds = BTreeMap::new();
    for h in img.handler_addresses() {
        add_seed(&mut seeds, h, Seed::Handler);
    }
    for insn in listing.iter() {
        let Some(t) = insn.target() else { continue };
        match insn.op {
            Op::Bl => add_seed(&mut seeds, t, Seed::Call),
            Op::B if listing.get(t).is_some_and(|i| i.is_prologue()) => add_seed(&mut seeds, t, Seed::Branch),
            _ => {}
        }
    }
    for set in tables {
        // Targets below the dispatch site are separate functions reached through
        // a pointer table; targets above it are case labels of the dispatcher.
        for &t in set.targets.iter().filter(|&&t| t < set.origin) {
            add_seed(&mut seeds, t, Seed::Table);
        }
    }
    let vt_end = img.code_base() + img.vector_table_len() as u32 * 4;
    if let Some(first) = next_valid(listing, vt_end, img.end()) {
        add_seed(&mut seeds, first, Seed::Discovered);
    }
    seeds.retain(|a, _| listing.get(*a).is_some_and(|i| !i.is_invalid()));
    seeds
}

/// Starts of all function blocks from handlers, call and branch targets,
/// pointer-table targets and the first instruction after the vector table.
pub fn seed_function_starts(img: &FirmwareImage, listing: &Listing, tables: &[BranchTargetSet]) -> Vec<u32> {
    seed_map(img, listing, tables).into_keys().collect()
}

fn is_padding(insn: &Instruction) -> bool {
    insn.is_nop_like() || (insn.width == 2 && insn.raw == 0)
}

/// First instruction at or after `from` that is not a nop or zero padding.
fn next_valid(listing: &Listing, from: u32, limit: u32) -> Option<u32> {
    listing
        .range(from..limit)
        .find(|i| !is_padding(i) && !i.is_invalid())
        .map(|i| i.address)
}

/// Whether `insn` unconditionally leaves the current path.
fn is_exit_kind(insn: &Instruction) -> bool {
    if insn.is_conditional() {
        return false;
    }
    match insn.op {
        Op::B => true,
        Op::Bx => true,
        _ => insn.writes_pc() && !matches!(insn.op, Op::Cbz | Op::Cbnz),
    }
}

enum BlockEnd {
    Exit(u32),
    Fallthrough(u32),
    /// A dispatch table reaches past the next start.
    Merge(u32),
}

struct Estimator<'a> {
    listing: &'a Listing,
    dispatch: BTreeMap<u32, u32>,
}

impl Estimator<'_> {
    /// Walks forward from `start`, tracking the furthest forward branch target
    /// inside the block; the first exit not jumped over ends the block.
    fn walk(&self, start: u32, limit: u32) -> BlockEnd {
        let mut reach = start;
        let mut pos = start;
        loop {
            if pos >= limit {
                return BlockEnd::Fallthrough(limit);
            }
            let Some(insn) = self.listing.get(pos) else {
                if reach > pos {
                    match self.listing.at_or_after(pos) {
                        Some(next) if next.address < limit => {
                            pos = next.address;
                            continue;
                        }
                        _ => return BlockEnd::Fallthrough(limit),
                    }
                }
                return BlockEnd::Exit(pos);
            };
            if let Some(&max) = self.dispatch.get(&pos) {
                if max >= limit {
                    return BlockEnd::Merge(max);
                }
                reach = reach.max(max);
            }
            if let Some(t) = insn.target() {
                let forward_inside = t > pos && t < limit;
                if forward_inside && matches!(insn.op, Op::B | Op::Cbz | Op::Cbnz) {
                    reach = reach.max(t);
                }
            }
            if is_exit_kind(insn) && insn.op != Op::Bl {
                let inside_forward = insn.op == Op::B && insn.target().is_some_and(|t| t > pos && t < limit);
                if !inside_forward && reach <= pos {
                    return BlockEnd::Exit(insn.end());
                }
            }
            pos = insn.end();
        }
    }
}

/// Estimates block boundaries from the seeds, discovering further starts
/// after each final exit.
pub fn estimate_boundaries(img: &FirmwareImage, listing: &Listing, tables: &[BranchTargetSet]) -> Functions {
    let mut starts = seed_map(img, listing, tables);
    let mut dispatch: BTreeMap<u32, u32> = BTreeMap::new();
    for set in tables {
        if let Some(m) = set.targets.iter().copied().filter(|&t| t > set.origin).max() {
            dispatch.insert(set.origin, m);
        }
    }
    let est = Estimator { listing, dispatch };
    let mut diags = Vec::new();
    let mut blocks = Vec::new();
    let end_of_code = img.end();
    let mut cursor = 0u32;
    while let Some((&s, _)) = starts.range(cursor..).next() {
        let limit = starts.range(s + 1..).next().map_or(end_of_code, |(&a, _)| a);
        let (end, fallthrough) = match est.walk(s, limit) {
            BlockEnd::Exit(e) => (e, false),
            BlockEnd::Fallthrough(e) => (e, true),
            BlockEnd::Merge(m) => {
                let absorbed: Vec<u32> =
                    starts.range(s + 1..=m).filter(|(_, k)| !k.pinned()).map(|(&a, _)| a).collect();
                if absorbed.is_empty() {
                    // Only pinned starts in the way; stop at the next one.
                    (limit, true)
                } else {
                    for a in absorbed {
                        starts.remove(&a);
                    }
                    continue;
                }
            }
        };
        if fallthrough {
            diags.push(Diagnostic::new(Stage::Funcs, "fallthrough_block", Some(s), "no exit before the next start"));
        }
        blocks.push(FunctionBlock {
            start: s,
            end,
            xrefs_in: Vec::new(),
            xrefs_out: Vec::new(),
            call_depth: 0,
            deny_listed: false,
            fallthrough,
        });
        if let Some(next) = next_valid(listing, end, limit) {
            add_seed(&mut starts, next, Seed::Discovered);
        }
        cursor = s + 1;
    }
    let mut f = Functions { blocks, diagnostics: diags };
    annotate_functions(&mut f, listing, tables);
    f
}

/// Fills in cross-references, call depth and deny-list status.
pub fn annotate_functions(f: &mut Functions, listing: &Listing, tables: &[BranchTargetSet]) {
    let starts: BTreeMap<u32, usize> = f.blocks.iter().enumerate().map(|(i, b)| (b.start, i)).collect();
    let n = f.blocks.len();
    let mut out: Vec<BTreeSet<u32>> = vec![BTreeSet::new(); n];
    let mut inn: Vec<BTreeSet<u32>> = vec![BTreeSet::new(); n];
    let mut calls = vec![false; n];
    let mut escapes = vec![false; n];
    let mut local_targets: Vec<BTreeSet<u32>> = vec![BTreeSet::new(); n];

    for (i, b) in f.blocks.iter().enumerate() {
        for insn in listing.range(b.start..b.end) {
            let target = insn.target();
            match insn.op {
                Op::Bl | Op::B => {
                    let t = target.unwrap();
                    if insn.op == Op::Bl {
                        calls[i] = true;
                    }
                    if b.contains(t) && insn.op == Op::B {
                        continue;
                    }
                    match starts.get(&t) {
                        Some(&j) => {
                            out[i].insert(t);
                            inn[j].insert(insn.address);
                            if insn.op == Op::B {
                                local_targets[i].insert(t);
                            }
                        }
                        None => escapes[i] = true,
                    }
                }
                Op::Cbz | Op::Cbnz => {
                    if !b.contains(target.unwrap()) {
                        escapes[i] = true;
                    }
                }
                Op::Blx | Op::Svc => calls[i] = true,
                _ if insn.is_return() || (insn.writes_pc() && !matches!(insn.op, Op::Tbb | Op::Tbh)) => escapes[i] = true,
                _ => {}
            }
        }
        if b.fallthrough {
            match starts.get(&b.end) {
                Some(_) => {
                    local_targets[i].insert(b.end);
                }
                None => escapes[i] = true,
            }
        }
    }
    for set in tables {
        let Some(i) = f.containing(set.origin).map(|b| starts[&b.start]) else { continue };
        for &t in &set.targets {
            if f.blocks[i].contains(t) {
                continue;
            }
            if let Some(&j) = starts.get(&t) {
                out[i].insert(t);
                inn[j].insert(set.origin);
            }
            escapes[i] = true;
        }
    }

    // Deny-list: blocks that never call, never return and only transfer to
    // other such blocks (greatest fixpoint).
    let mut deny: Vec<bool> = (0..n).map(|i| !calls[i] && !escapes[i]).collect();
    loop {
        let mut changed = false;
        for i in 0..n {
            if deny[i] && local_targets[i].iter().any(|t| !deny[starts[t]]) {
                deny[i] = false;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    for i in 0..n {
        if deny[i] && !has_loop(&f.blocks[i], listing, &local_targets[i]) {
            deny[i] = false;
        }
    }

    let depths = call_depths(&out, &starts);
    for (i, b) in f.blocks.iter_mut().enumerate() {
        b.xrefs_out = out[i].iter().copied().collect();
        b.xrefs_in = inn[i].iter().copied().collect();
        b.call_depth = depths[i];
        b.deny_listed = deny[i];
    }
}

/// Whether the block ends in an unconditional branch back into itself or to
/// another block.
fn has_loop(b: &FunctionBlock, listing: &Listing, local_targets: &BTreeSet<u32>) -> bool {
    !local_targets.is_empty()
        || listing.range(b.start..b.end).any(|i| {
            i.op == Op::B && !i.is_conditional() && i.target().is_some_and(|t| t <= i.address && b.contains(t))
        })
}

/// Call depth over the condensation of the call graph.
fn call_depths(out: &[BTreeSet<u32>], starts: &BTreeMap<u32, usize>) -> Vec<u32> {
    let mut g: DiGraph<(), ()> = DiGraph::with_capacity(out.len(), 0);
    let nodes: Vec<NodeIndex> = (0..out.len()).map(|_| g.add_node(())).collect();
    for (i, targets) in out.iter().enumerate() {
        for t in targets {
            g.add_edge(nodes[i], nodes[starts[t]], ());
        }
    }
    let mut depth = vec![0u32; out.len()];
    // Tarjan yields components callees-first.
    for comp in tarjan_scc(&g) {
        let members: BTreeSet<usize> = comp.iter().map(|n| n.index()).collect();
        let mut d = 0;
        let mut any_edge = false;
        for &m in &members {
            for t in &out[m] {
                any_edge = true;
                let j = starts[t];
                if !members.contains(&j) {
                    d = d.max(depth[j] + 1);
                }
            }
        }
        let d = if any_edge { d.max(1) } else { 0 };
        for &m in &members {
            depth[m] = d;
        }
    }
    depth
}
