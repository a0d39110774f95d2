//! Call path enumeration and forward tracing to calls of interest.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::diag::{hex, Diagnostic, Stage};
use crate::exec::{fetch, run_modeled, step_forced, Budget, Env, ExecError, Flow, MachineState, Meter, Model, Overlay};
use crate::funcs::Functions;
use crate::image::FirmwareImage;
use crate::isa::{Instruction, Op, LR, SP};
use crate::listing::Listing;

/// Iterations of one backward branch allowed per fork.
pub const LOOP_GUARD: u32 = 256;
/// Bytes above sp saved with each capture.
pub const STACK_WINDOW: u32 = 64;

const ROOT_RETURN: u32 = 0xffff_fff0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceConfig {
    pub max_call_depth: u32,
    pub time_limit: Duration,
    pub max_forks: usize,
    pub max_paths: usize,
    pub max_instructions: u64,
}

impl Default for TraceConfig {
    fn default() -> Self {
        TraceConfig {
            max_call_depth: 1,
            time_limit: Duration::from_secs(90 * 60),
            max_forks: 64,
            max_paths: 64,
            max_instructions: 2_000_000,
        }
    }
}

/// One hop of a call path: a block and the call site inside it that leads
/// to the next hop (or, for the last hop, the call of interest itself).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PathStep {
    #[serde(with = "hex")]
    pub block: u32,
    #[serde(with = "hex")]
    pub site: u32,
}

pub type CallPath = Vec<PathStep>;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PathSet {
    pub paths: Vec<CallPath>,
    pub truncated: bool,
    /// No root reaches the site; the only path starts at its own block.
    pub degenerate: bool,
}

/// All acyclic caller chains from blocks without callers down to `site`.
pub fn enumerate_paths(site: u32, functions: &Functions, max_paths: usize) -> PathSet {
    let mut out = PathSet::default();
    let Some(block) = functions.containing(site) else {
        return out;
    };
    let mut suffix = vec![PathStep { block: block.start, site }];
    let mut on_path = BTreeSet::from([block.start]);
    walk_callers(functions, &mut suffix, &mut on_path, max_paths, &mut out);
    if out.paths.is_empty() {
        out.paths.push(vec![PathStep { block: block.start, site }]);
        out.degenerate = true;
    }
    out
}

fn walk_callers(
    functions: &Functions,
    suffix: &mut Vec<PathStep>,
    on_path: &mut BTreeSet<u32>,
    max_paths: usize,
    out: &mut PathSet,
) {
    let head = suffix.last().expect("non-empty").block;
    let block = functions.by_start(head).expect("path blocks exist");
    if block.xrefs_in.is_empty() {
        if out.paths.len() >= max_paths {
            out.truncated = true;
        } else {
            out.paths.push(suffix.iter().rev().copied().collect());
        }
        return;
    }
    for &call in &block.xrefs_in {
        let Some(caller) = functions.containing(call) else { continue };
        if caller.deny_listed || on_path.contains(&caller.start) {
            continue;
        }
        if out.paths.len() >= max_paths {
            out.truncated = true;
            return;
        }
        suffix.push(PathStep { block: caller.start, site: call });
        on_path.insert(caller.start);
        walk_callers(functions, suffix, on_path, max_paths, out);
        on_path.remove(&caller.start);
        suffix.pop();
    }
}

/// Machine state at the moment control reaches a call of interest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoiCapture {
    pub site: u32,
    pub path_id: usize,
    pub regs: [Option<u32>; 4],
    pub sp: Option<u32>,
    /// `STACK_WINDOW` bytes starting at sp.
    pub stack: Vec<Option<u8>>,
    pub mem: Overlay,
}

#[derive(Debug, Clone, Default)]
pub struct TraceResult {
    pub captures: Vec<CoiCapture>,
    pub timed_out: bool,
    /// Forks were dropped because of the fork cap or the loop guard.
    pub truncated: bool,
    /// Off-path callees that were executed.
    pub entered: BTreeSet<u32>,
    pub forks: usize,
    pub diagnostics: Vec<Diagnostic>,
}

/// Callees with a native model instead of traced code.
pub type Models = BTreeMap<u32, Model>;

/// Outputs of calls of interest analysed earlier.
pub struct Replay<'a> {
    /// Sites that produced outputs.
    pub sites: BTreeSet<u32>,
    /// Given the state at one of `sites`, the output bytes written, by address.
    pub outputs: &'a dyn Fn(&CoiCapture) -> Vec<(u32, Vec<u8>)>,
}

pub struct Tracer<'a> {
    pub img: &'a FirmwareImage,
    pub listing: &'a Listing,
    pub functions: &'a Functions,
    pub models: &'a Models,
    pub config: TraceConfig,
    /// Re-applies earlier outputs when a trace passes their producing call,
    /// so later writes on the path (such as `.bss` zeroing) cannot hide them.
    pub replay: Option<&'a Replay<'a>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Frame {
    /// Return address; `None` for the path root.
    ret: Option<u32>,
    /// Index into the path for on-path frames.
    hop: Option<usize>,
}

#[derive(Debug, Clone)]
struct Fork {
    st: MachineState,
    pc: u32,
    frames: Vec<Frame>,
    loops: BTreeMap<u32, u32>,
    force: Option<bool>,
}

enum Stop {
    /// The fork ended without reaching the call of interest.
    Dead,
    Captured(CoiCapture),
    Budget(ExecError),
}

impl<'a> Tracer<'a> {
    /// Executes `path` from its root, forking on undecidable conditions.
    pub fn forward_trace(&self, path: &CallPath, path_id: usize, shared: &Overlay) -> TraceResult {
        let mut res = TraceResult::default();
        let Some(first) = path.first() else { return res };
        let env = Env { img: self.img, shared: Some(shared) };
        let mut meter =
            Budget { max_instructions: self.config.max_instructions, time_limit: Some(self.config.time_limit) }.meter();

        let mut st = MachineState::new();
        st.set_reg(LR, Some(ROOT_RETURN | 1));
        let root = Fork { st, pc: first.block, frames: vec![Frame { ret: None, hop: Some(0) }], loops: BTreeMap::new(), force: None };
        let mut pending = vec![root];
        res.forks = 1;
        while let Some(fork) = pending.pop() {
            match self.run_fork(fork, path, path_id, &env, &mut meter, &mut pending, &mut res) {
                Stop::Dead => {}
                Stop::Captured(c) => {
                    if !res.captures.contains(&c) {
                        res.captures.push(c);
                    }
                }
                Stop::Budget(e) => {
                    res.timed_out = true;
                    let msg = format!("path {path_id}: {e}");
                    res.diagnostics.push(Diagnostic::new(Stage::Trace, "timeout", Some(first.block), msg));
                    break;
                }
            }
        }
        res
    }

    #[allow(clippy::too_many_arguments)]
    fn run_fork(
        &self,
        mut f: Fork,
        path: &CallPath,
        path_id: usize,
        env: &Env,
        meter: &mut Meter,
        pending: &mut Vec<Fork>,
        res: &mut TraceResult,
    ) -> Stop {
        loop {
            if let Err(e) = meter.tick() {
                return Stop::Budget(e);
            }
            let hop = f.frames.last().and_then(|fr| fr.hop);
            if let Some(h) = hop {
                if f.pc == path[h].site {
                    let insn = match fetch(self.listing, self.img, f.pc) {
                        Ok(i) => i,
                        Err(e) => return self.abort(res, path_id, f.pc, &e.to_string()),
                    };
                    if h + 1 == path.len() {
                        return Stop::Captured(capture(&f.st, env, f.pc, path_id));
                    }
                    self.follow_path_call(&mut f, &insn, path[h + 1].block, h + 1);
                    continue;
                }
            }
            let insn = match fetch(self.listing, self.img, f.pc) {
                Ok(i) => i,
                Err(e) => match self.unwind(&mut f) {
                    true => {
                        self.note_unwind(res, path_id, f.pc, &e.to_string());
                        continue;
                    }
                    false => return self.abort(res, path_id, f.pc, &e.to_string()),
                },
            };
            let force = f.force.take();
            let flow = match step_forced(&mut f.st, &insn, env, force) {
                Ok(flow) => flow,
                Err(e) => match self.unwind(&mut f) {
                    true => {
                        self.note_unwind(res, path_id, insn.address, &e.to_string());
                        continue;
                    }
                    false => return self.abort(res, path_id, insn.address, &e.to_string()),
                },
            };
            match flow {
                Flow::Next => f.pc = insn.end(),
                Flow::Jump(t) => {
                    if t <= insn.address {
                        let n = f.loops.entry(t).or_default();
                        *n += 1;
                        if *n > LOOP_GUARD {
                            res.truncated = true;
                            if self.unwind(&mut f) {
                                continue;
                            }
                            let msg = format!("path {path_id}: loop at 0x{t:x} cut after {LOOP_GUARD} iterations");
                            res.diagnostics.push(Diagnostic::new(Stage::Trace, "loop_guard", Some(insn.address), msg));
                            return Stop::Dead;
                        }
                    }
                    f.pc = t;
                }
                Flow::Indirect(Some(t)) => {
                    if t == ROOT_RETURN {
                        return Stop::Dead;
                    }
                    if f.frames.len() > 1 && f.frames.last().and_then(|fr| fr.ret) == Some(t) {
                        f.frames.pop();
                    }
                    f.pc = t;
                }
                Flow::Indirect(None) => {
                    if self.unwind(&mut f) {
                        continue;
                    }
                    return Stop::Dead;
                }
                Flow::Call { target, ret } => {
                    let before = self.replay_capture(&f.st, env, insn.address, path_id);
                    self.off_path_call(&mut f, target, ret, res);
                    if f.pc == ret {
                        self.replay_outputs(&mut f.st, before);
                    }
                }
                Flow::Svc(_) => {
                    let before = self.replay_capture(&f.st, env, insn.address, path_id);
                    f.st.set_reg(0, Some(0));
                    self.replay_outputs(&mut f.st, before);
                    f.pc = insn.end();
                }
                Flow::Indeterminate => {
                    if res.forks >= self.config.max_forks {
                        res.truncated = true;
                        f.force = Some(true);
                    } else {
                        res.forks += 1;
                        let mut other = f.clone();
                        other.force = Some(false);
                        pending.push(other);
                        f.force = Some(true);
                    }
                }
                Flow::Trap => {
                    if self.unwind(&mut f) {
                        continue;
                    }
                    return self.abort(res, path_id, insn.address, &format!("trap at {insn}"));
                }
            }
        }
    }

    /// Transfers control along the path regardless of flags.
    fn follow_path_call(&self, f: &mut Fork, insn: &Instruction, next: u32, hop: usize) {
        let top = *f.frames.last().expect("frame");
        match insn.op {
            Op::Bl | Op::Blx => {
                f.st.set_reg(LR, Some(insn.end() | 1));
                f.frames.push(Frame { ret: Some(insn.end()), hop: Some(hop) });
            }
            _ => {
                *f.frames.last_mut().expect("frame") = Frame { ret: top.ret, hop: Some(hop) };
            }
        }
        f.force = None;
        f.pc = next;
    }

    /// rules for calls that are not the next hop of the path.
    fn off_path_call(&self, f: &mut Fork, target: Option<u32>, ret: u32, res: &mut TraceResult) {
        if let Some(t) = target {
            if let Some(m) = self.models.get(&t) {
                run_modeled(&mut f.st, *m);
                f.pc = ret;
                return;
            }
            if let Some(b) = self.functions.by_start(t) {
                if !b.deny_listed && b.call_depth < self.config.max_call_depth {
                    res.entered.insert(t);
                    f.frames.push(Frame { ret: Some(ret), hop: None });
                    f.pc = t;
                    return;
                }
            }
        }
        f.st.set_reg(0, Some(0));
        f.pc = ret;
    }

    fn replay_capture(&self, st: &MachineState, env: &Env, site: u32, path_id: usize) -> Option<CoiCapture> {
        let r = self.replay?;
        r.sites.contains(&site).then(|| capture(st, env, site, path_id))
    }

    fn replay_outputs(&self, st: &mut MachineState, at: Option<CoiCapture>) {
        if let (Some(replay), Some(cap)) = (self.replay, at) {
            for (addr, bytes) in (replay.outputs)(&cap) {
                st.write_bytes(addr, &bytes);
            }
        }
    }

    /// Abandons the outermost off-path callee as if it had been skipped.
    fn unwind(&self, f: &mut Fork) -> bool {
        let Some(i) = f.frames.iter().position(|fr| fr.hop.is_none()) else { return false };
        let ret = f.frames[i].ret.expect("off-path frames have a return");
        f.frames.truncate(i);
        f.st.set_reg(0, Some(0));
        f.force = None;
        f.pc = ret;
        true
    }

    /// Records an off-path callee abandoned on an error, so unsupported
    /// encodings show up in the report even when the trace recovers.
    fn note_unwind(&self, res: &mut TraceResult, path_id: usize, at: u32, why: &str) {
        let msg = format!("path {path_id}: callee abandoned, r0 := 0: {why}");
        res.diagnostics.push(Diagnostic::new(Stage::Trace, "callee_unwound", Some(at), msg));
    }

    fn abort(&self, res: &mut TraceResult, path_id: usize, at: u32, why: &str) -> Stop {
        let msg = format!("path {path_id}: {why}");
        res.diagnostics.push(Diagnostic::new(Stage::Trace, "aborted", Some(at), msg));
        Stop::Dead
    }
}

fn capture(st: &MachineState, env: &Env, site: u32, path_id: usize) -> CoiCapture {
    let sp = st.reg(SP);
    let stack = match sp {
        Some(sp) => env.read_bytes(st, sp, STACK_WINDOW),
        None => vec![None; STACK_WINDOW as usize],
    };
    CoiCapture {
        site,
        path_id,
        regs: [st.reg(0), st.reg(1), st.reg(2), st.reg(3)],
        sp,
        stack,
        mem: st.mem.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::funcs::FunctionBlock;

    fn block(start: u32, end: u32, xrefs_in: &[u32]) -> FunctionBlock {
        FunctionBlock {
            start,
            end,
            xrefs_in: xrefs_in.to_vec(),
            xrefs_out: Vec::new(),
            call_depth: 0,
            deny_listed: false,
            fallthrough: false,
        }
    }

    #[test]
    fn diamond_has_two_paths() {
        // root(0x100) calls a(0x200) and b(0x300); both call c(0x400), which holds the site.
        let f = Functions {
            blocks: vec![
                block(0x100, 0x110, &[]),
                block(0x200, 0x210, &[0x102]),
                block(0x300, 0x310, &[0x106]),
                block(0x400, 0x410, &[0x204, 0x304]),
            ],
            diagnostics: Vec::new(),
        };
        let ps = enumerate_paths(0x408, &f, 64);
        let step = |block, site| PathStep { block, site };
        assert_eq!(
            ps.paths,
            vec![
                vec![step(0x100, 0x102), step(0x200, 0x204), step(0x400, 0x408)],
                vec![step(0x100, 0x106), step(0x300, 0x304), step(0x400, 0x408)],
            ]
        );
        assert!(!ps.truncated && !ps.degenerate);
        let capped = enumerate_paths(0x408, &f, 1);
        assert_eq!(capped.paths.len(), 1);
        assert!(capped.truncated);
    }

    #[test]
    fn cycle_without_root_is_degenerate() {
        let f = Functions {
            blocks: vec![block(0x100, 0x110, &[0x204]), block(0x200, 0x210, &[0x104])],
            diagnostics: Vec::new(),
        };
        let ps = enumerate_paths(0x106, &f, 64);
        assert!(ps.degenerate);
        assert_eq!(ps.paths, vec![vec![PathStep { block: 0x100, site: 0x106 }]]);
    }
}
