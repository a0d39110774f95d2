//! Calls of interest: supervisor calls and behaviourally matched functions.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::dataid::BranchTargetSet;
use crate::diag::hex;
use crate::exec::{run_function, Budget, Env, MachineState, Model, RunEnd};
use crate::funcs::{FunctionBlock, Functions};
use crate::image::FirmwareImage;
use crate::isa::Op;
use crate::listing::Listing;

/// Instructions a candidate may execute per test set.
pub const PATTERN_BUDGET: u64 = 10_000;

/// First synthetic address handed to an input wildcard.
const WILDCARD_BASE: u32 = 0x2400_0000;
const WILDCARD_STRIDE: u32 = 0x1_0000;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoiKind {
    Svc(#[serde(with = "hex_u8")] u8),
    Function(String),
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CoiSite {
    pub kind: CoiKind,
    #[serde(with = "hex")]
    pub site: u32,
    #[serde(with = "hex::opt", default, skip_serializing_if = "Option::is_none")]
    pub callee_start: Option<u32>,
}

mod hex_u8 {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u8, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format!("0x{v:x}"))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u8, D::Error> {
        let s = String::deserialize(d)?;
        crate::diag::hex::parse(&s)
            .and_then(|v| u8::try_from(v).ok())
            .ok_or_else(|| D::Error::custom(format!("bad svc number {s:?}")))
    }
}

/// Every `svc` in code whose number is in `numbers`, in address order.
pub fn find_svcs(listing: &Listing, numbers: &BTreeSet<u8>) -> Vec<CoiSite> {
    if numbers.is_empty() {
        return Vec::new();
    }
    listing
        .iter()
        .filter(|i| i.op == Op::Svc)
        .filter_map(|i| {
            let n = i.imm(0)? as u8;
            numbers.contains(&n).then_some(CoiSite { kind: CoiKind::Svc(n), site: i.address, callee_start: None })
        })
        .collect()
}

/// A register or memory value in a pattern: a number or a wildcard name.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PatternValue {
    Const(u32),
    Wildcard(String),
}

impl<'de> Deserialize<'de> for PatternValue {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(u32),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(n) => Ok(PatternValue::Const(n)),
            Raw::Str(s) if s.starts_with('$') => Ok(PatternValue::Wildcard(s)),
            Raw::Str(s) => hex::parse(&s)
                .map(PatternValue::Const)
                .ok_or_else(|| serde::de::Error::custom(format!("bad value {s:?}"))),
        }
    }
}

impl Serialize for PatternValue {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            PatternValue::Const(v) => s.serialize_str(&hex::format(*v)),
            PatternValue::Wildcard(w) => s.serialize_str(w),
        }
    }
}

/// Bytes at a fixed address or at an offset from a wildcard.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemSpec {
    #[serde(with = "hex::opt", default, skip_serializing_if = "Option::is_none")]
    pub addr: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wildcard: Option<String>,
    #[serde(default)]
    pub offset: u32,
    #[serde(with = "hex_bytes")]
    pub bytes: Vec<u8>,
}

mod hex_bytes {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        hex::decode(s.trim_start_matches("0x")).map_err(D::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestSet {
    #[serde(default)]
    pub regs_in: BTreeMap<String, PatternValue>,
    #[serde(default)]
    pub mem_in: Vec<MemSpec>,
    #[serde(default)]
    pub regs_out: BTreeMap<String, PatternValue>,
    #[serde(default)]
    pub mem_out: Vec<MemSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FunctionPattern {
    pub name: String,
    pub test_sets: Vec<TestSet>,
}

fn reg_index(name: &str) -> Option<u8> {
    match name {
        "sp" => Some(13),
        "lr" => Some(14),
        _ => name.strip_prefix('r')?.parse().ok().filter(|&r| r <= 12),
    }
}

impl FunctionPattern {
    pub fn parse(json: &str) -> Result<FunctionPattern, String> {
        let p: FunctionPattern = serde_json::from_str(json).map_err(|e| e.to_string())?;
        p.validate()?;
        Ok(p)
    }

    fn validate(&self) -> Result<(), String> {
        if self.test_sets.is_empty() {
            return Err(format!("pattern {}: no test sets", self.name));
        }
        for (i, t) in self.test_sets.iter().enumerate() {
            if t.regs_out.is_empty() && t.mem_out.is_empty() {
                return Err(format!("pattern {}: test set {i} has no expected outputs", self.name));
            }
            for r in t.regs_in.keys().chain(t.regs_out.keys()) {
                if reg_index(r).is_none() {
                    return Err(format!("pattern {}: unknown register {r:?}", self.name));
                }
            }
            for m in t.mem_in.iter().chain(&t.mem_out) {
                if m.addr.is_some() == m.wildcard.is_some() {
                    return Err(format!("pattern {}: memory entry needs exactly one of addr or wildcard", self.name));
                }
                if m.wildcard.as_deref().is_some_and(|w| !w.starts_with('$')) {
                    return Err(format!("pattern {}: wildcard names start with '$'", self.name));
                }
            }
        }
        Ok(())
    }

    /// Lower bound on instructions a function needs to satisfy the pattern.
    pub fn min_instructions(&self) -> usize {
        self.test_sets
            .iter()
            .map(|t| {
                let regs = t.regs_out.iter().filter(|(r, v)| t.regs_in.get(*r) != Some(v)).count();
                regs + usize::from(!t.mem_out.is_empty()) + 1
            })
            .max()
            .unwrap_or(1)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MatchError {
    #[error("no function satisfies pattern {0}")]
    NoMatch(String),
    #[error("pattern {name} matches {} functions at call depth {depth}", .starts.len())]
    AmbiguousMatch { name: String, depth: u32, starts: Vec<u32> },
}

/// Concrete addresses bound to wildcards while running one test set.
#[derive(Default)]
struct Bindings(BTreeMap<String, u32>);

impl Bindings {
    fn input(&mut self, w: &str) -> u32 {
        let next = WILDCARD_BASE + self.0.len() as u32 * WILDCARD_STRIDE;
        *self.0.entry(w.to_string()).or_insert(next)
    }
}

fn input_value(v: &PatternValue, b: &mut Bindings) -> u32 {
    match v {
        PatternValue::Const(c) => *c,
        PatternValue::Wildcard(w) => b.input(w),
    }
}

/// Runs one test set against a candidate entry point.
pub fn run_test_set(
    set: &TestSet,
    entry: u32,
    listing: &Listing,
    img: &FirmwareImage,
    models: &BTreeMap<u32, Model>,
) -> bool {
    let mut b = Bindings::default();
    let mut st = MachineState::new();
    for (r, v) in &set.regs_in {
        let v = input_value(v, &mut b);
        st.set_reg(reg_index(r).expect("validated"), Some(v));
    }
    for m in &set.mem_in {
        let base = match (&m.addr, &m.wildcard) {
            (Some(a), _) => *a,
            (None, Some(w)) => b.input(w),
            _ => unreachable!("validated"),
        };
        st.write_bytes(base.wrapping_add(m.offset), &m.bytes);
    }
    let env = Env::new(img);
    let mut meter = Budget::instructions(PATTERN_BUDGET).meter();
    match run_function(&mut st, entry, listing, &env, models, &mut meter) {
        Ok(RunEnd::Returned) => {}
        _ => return false,
    }
    check_outputs(set, &st, &env, b)
}

fn check_outputs(set: &TestSet, st: &MachineState, env: &Env, mut b: Bindings) -> bool {
    // Output-only wildcards bound through registers.
    for (r, v) in &set.regs_out {
        let got = st.reg(reg_index(r).expect("validated"));
        match v {
            PatternValue::Const(c) => {
                if got != Some(*c) {
                    return false;
                }
            }
            PatternValue::Wildcard(w) => {
                let Some(got) = got else { return false };
                if *b.0.entry(w.clone()).or_insert(got) != got {
                    return false;
                }
            }
        }
    }
    let mut by_wildcard: BTreeMap<&str, Vec<&MemSpec>> = BTreeMap::new();
    for m in &set.mem_out {
        match (&m.addr, &m.wildcard) {
            (Some(a), _) => {
                let got = env.read_bytes(st, a.wrapping_add(m.offset), m.bytes.len() as u32);
                if !bytes_equal(&got, &m.bytes) {
                    return false;
                }
            }
            (None, Some(w)) => by_wildcard.entry(w).or_default().push(m),
            _ => unreachable!("validated"),
        }
    }
    for (w, specs) in by_wildcard {
        let ok_at = |base: u32| {
            specs.iter().all(|m| bytes_equal(&env.read_bytes(st, base.wrapping_add(m.offset), m.bytes.len() as u32), &m.bytes))
        };
        match b.0.get(w) {
            Some(&base) => {
                if !ok_at(base) {
                    return false;
                }
            }
            None => {
                // Bind to the single written location satisfying every entry.
                let first = specs[0];
                let candidates: BTreeSet<u32> = st
                    .mem
                    .keys()
                    .map(|&a| a.wrapping_sub(first.offset))
                    .filter(|&base| ok_at(base))
                    .collect();
                if candidates.len() != 1 {
                    return false;
                }
            }
        }
    }
    true
}

fn bytes_equal(got: &[Option<u8>], want: &[u8]) -> bool {
    got.len() == want.len() && got.iter().zip(want).all(|(g, w)| *g == Some(*w))
}

/// Whether every test set passes for the function at `start`.
pub fn satisfies(
    pattern: &FunctionPattern,
    start: u32,
    listing: &Listing,
    img: &FirmwareImage,
    models: &BTreeMap<u32, Model>,
) -> bool {
    pattern.test_sets.iter().all(|t| run_test_set(t, start, listing, img, models))
}

fn instruction_count(block: &FunctionBlock, listing: &Listing) -> usize {
    listing.range(block.start..block.end).count()
}

/// Finds the unique function satisfying `pattern`, preferring the lowest
/// call depth.
pub fn match_function(
    functions: &Functions,
    listing: &Listing,
    img: &FirmwareImage,
    pattern: &FunctionPattern,
    models: &BTreeMap<u32, Model>,
) -> Result<u32, MatchError> {
    let min = pattern.min_instructions();
    let mut by_depth: BTreeMap<u32, Vec<&FunctionBlock>> = BTreeMap::new();
    for b in functions.blocks.iter().filter(|b| !b.deny_listed) {
        if instruction_count(b, listing) >= min {
            by_depth.entry(b.call_depth).or_default().push(b);
        }
    }
    for (depth, blocks) in by_depth {
        let starts: Vec<u32> =
            blocks.iter().filter(|b| satisfies(pattern, b.start, listing, img, models)).map(|b| b.start).collect();
        match starts.len() {
            0 => continue,
            1 => return Ok(starts[0]),
            _ => return Err(MatchError::AmbiguousMatch { name: pattern.name.clone(), depth, starts }),
        }
    }
    Err(MatchError::NoMatch(pattern.name.clone()))
}

/// Direct calls, tail branches and recorded indirect dispatches reaching `callee`.
pub fn find_call_sites(
    functions: &Functions,
    listing: &Listing,
    tables: &[BranchTargetSet],
    name: &str,
    callee: u32,
) -> Vec<CoiSite> {
    let mut sites = BTreeSet::new();
    for i in listing.iter() {
        let direct = matches!(i.op, Op::Bl | Op::Blx | Op::B) && i.target() == Some(callee);
        if !direct {
            continue;
        }
        // A branch inside the callee itself is a loop, not a call.
        if i.op == Op::B && functions.containing(i.address).is_some_and(|b| b.start == callee) {
            continue;
        }
        sites.insert(i.address);
    }
    for t in tables.iter().filter(|t| t.targets.contains(&callee)) {
        if functions.containing(t.origin).is_none_or(|b| b.start != callee) {
            sites.insert(t.origin);
        }
    }
    sites
        .into_iter()
        .map(|site| CoiSite { kind: CoiKind::Function(name.to_string()), site, callee_start: Some(callee) })
        .collect()
}
