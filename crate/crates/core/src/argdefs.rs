//! Argument definitions: templates describing how to read a call's arguments
//! out of a capture, and how declared outputs feed later traces.
//!
//! Grammar (JSON). A definition is `{"coi": name, "args": [{"name", "type"}]}`
//! where a type node is one of
//!
//! * `"u8" | "u16" | "u32" | "i8" | "i16" | "i32"`
//! * `"bits:<n>"` for an unsigned field of n bits (1..=32)
//! * `"bytes:<n>"`
//! * `{"ptr": node}` for one level of indirection
//! * `{"struct": {"field": [offset_bits, node], ...}}`
//! * `{"out": node}`, a location the callee writes and later code reads

use std::collections::BTreeMap;
use std::fmt;

use serde::de::{self, MapAccess, Visitor};
use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::{json, Map, Value};

use crate::diag::hex;
use crate::exec::Overlay;
use crate::image::FirmwareImage;
use crate::trace::CoiCapture;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Node {
    Scalar { bits: u8, signed: bool },
    Bits(u8),
    Bytes(u32),
    Ptr(Box<Node>),
    Struct(Vec<Field>),
    Out(Box<Node>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Field {
    pub name: String,
    pub offset_bits: u32,
    pub node: Node,
}

impl Node {
    fn token(&self) -> Option<String> {
        Some(match self {
            Node::Scalar { bits, signed } => format!("{}{bits}", if *signed { 'i' } else { 'u' }),
            Node::Bits(n) => format!("bits:{n}"),
            Node::Bytes(n) => format!("bytes:{n}"),
            _ => return None,
        })
    }

    fn parse_token(s: &str) -> Result<Node, String> {
        let scalar = |bits, signed| Ok(Node::Scalar { bits, signed });
        match s {
            "u8" => scalar(8, false),
            "u16" => scalar(16, false),
            "u32" => scalar(32, false),
            "i8" => scalar(8, true),
            "i16" => scalar(16, true),
            "i32" => scalar(32, true),
            _ => {
                if let Some(n) = s.strip_prefix("bytes:") {
                    let n: u32 = n.parse().map_err(|_| format!("bad byte count in {s:?}"))?;
                    if n == 0 {
                        return Err("bytes:0 is empty".into());
                    }
                    Ok(Node::Bytes(n))
                } else if let Some(n) = s.strip_prefix("bits:") {
                    let n: u8 = n.parse().map_err(|_| format!("bad bit count in {s:?}"))?;
                    if !(1..=32).contains(&n) {
                        return Err(format!("bits:{n} outside 1..=32"));
                    }
                    Ok(Node::Bits(n))
                } else {
                    Err(format!("unknown type {s:?}"))
                }
            }
        }
    }

    /// Footprint in bits when stored in memory.
    pub fn size_bits(&self) -> u32 {
        match self {
            Node::Scalar { bits, .. } | Node::Bits(bits) => *bits as u32,
            Node::Bytes(n) => n * 8,
            Node::Ptr(_) => 32,
            Node::Struct(fields) => fields.iter().map(|f| f.offset_bits + f.node.size_bits()).max().unwrap_or(0),
            Node::Out(n) => n.size_bits(),
        }
    }

    fn validate(&self) -> Result<(), String> {
        match self {
            Node::Ptr(n) | Node::Out(n) => n.validate(),
            Node::Struct(fields) => {
                for f in fields {
                    if !matches!(f.node, Node::Bits(_) | Node::Scalar { .. }) && f.offset_bits % 8 != 0 {
                        return Err(format!("field {} must be byte aligned", f.name));
                    }
                    f.node.validate()?;
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

impl Serialize for Node {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        if let Some(t) = self.token() {
            return s.serialize_str(&t);
        }
        let mut m = s.serialize_map(Some(1))?;
        match self {
            Node::Ptr(n) => m.serialize_entry("ptr", n)?,
            Node::Out(n) => m.serialize_entry("out", n)?,
            Node::Struct(fields) => m.serialize_entry("struct", &FieldsRef(fields))?,
            _ => unreachable!("token kinds handled above"),
        }
        m.end()
    }
}

struct FieldsRef<'a>(&'a [Field]);

impl Serialize for FieldsRef<'_> {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut m = s.serialize_map(Some(self.0.len()))?;
        for f in self.0 {
            m.serialize_entry(&f.name, &(f.offset_bits, &f.node))?;
        }
        m.end()
    }
}

impl<'de> Deserialize<'de> for Node {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Node, D::Error> {
        d.deserialize_any(NodeVisitor)
    }
}

struct NodeVisitor;

impl<'de> Visitor<'de> for NodeVisitor {
    type Value = Node;

    fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
        f.write_str("a type name or an object with one of ptr, struct, out")
    }

    fn visit_str<E: de::Error>(self, s: &str) -> Result<Node, E> {
        Node::parse_token(s).map_err(E::custom)
    }

    fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<Node, A::Error> {
        let Some(key) = map.next_key::<String>()? else {
            return Err(de::Error::custom("empty type object"));
        };
        let node = match key.as_str() {
            "ptr" => Node::Ptr(Box::new(map.next_value()?)),
            "out" => Node::Out(Box::new(map.next_value()?)),
            "struct" => Node::Struct(map.next_value::<Fields>()?.0),
            other => return Err(de::Error::unknown_field(other, &["ptr", "struct", "out"])),
        };
        if let Some(extra) = map.next_key::<String>()? {
            return Err(de::Error::custom(format!("unexpected key {extra:?} after {key:?}")));
        }
        node.validate().map_err(de::Error::custom)?;
        Ok(node)
    }
}

struct Fields(Vec<Field>);

impl<'de> Deserialize<'de> for Fields {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Fields, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = Fields;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a map of field name to [offset_bits, type]")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<Fields, A::Error> {
                let mut out: Vec<Field> = Vec::new();
                while let Some(name) = map.next_key::<String>()? {
                    if out.iter().any(|f| f.name == name) {
                        return Err(de::Error::custom(format!("duplicate field {name:?}")));
                    }
                    let (offset_bits, node): (u32, Node) = map.next_value()?;
                    out.push(Field { name, offset_bits, node });
                }
                Ok(Fields(out))
            }
        }
        d.deserialize_map(V)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Arg {
    pub name: String,
    #[serde(rename = "type")]
    pub node: Node,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArgDef {
    pub coi: String,
    #[serde(default)]
    pub args: Vec<Arg>,
}

#[derive(Debug, thiserror::Error)]
#[error("{what}: {source}")]
pub struct ArgDefError {
    what: String,
    #[source]
    source: serde_json::Error,
}

impl ArgDef {
    /// Parses a definition; errors carry the JSON line and column.
    pub fn parse(what: &str, json: &str) -> Result<ArgDef, ArgDefError> {
        let def: ArgDef = serde_json::from_str(json).map_err(|source| ArgDefError { what: what.to_string(), source })?;
        Ok(def)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("argdef serialises")
    }
}

/// The architectural SRAM region, which also holds the synthetic stack.
const SRAM: std::ops::Range<u32> = 0x2000_0000..0x4000_0000;

/// A byte as seen through a capture.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Cell {
    Known(u8),
    Unknown,
    Unmapped,
}

/// Read-only view of memory at capture time.
pub struct View<'a> {
    pub img: &'a FirmwareImage,
    pub capture: &'a CoiCapture,
    pub shared: &'a Overlay,
}

impl View<'_> {
    fn cell(&self, addr: u32) -> Cell {
        let from = |b: &Option<u8>| b.map_or(Cell::Unknown, Cell::Known);
        if let Some(b) = self.capture.mem.get(&addr) {
            return from(b);
        }
        if let Some(b) = self.shared.get(&addr) {
            return from(b);
        }
        match self.img.read_u8(addr) {
            Some(b) => Cell::Known(b),
            None if SRAM.contains(&addr) => Cell::Unknown,
            None => Cell::Unmapped,
        }
    }

    fn cells(&self, addr: u32, n: u32) -> Vec<Cell> {
        (0..n).map(|i| self.cell(addr.wrapping_add(i))).collect()
    }

    /// Value of argument `i`: r0–r3, then 32-bit stack slots from sp.
    pub fn arg_word(&self, i: usize) -> Option<u32> {
        if i < 4 {
            return self.capture.regs[i];
        }
        let off = (i - 4) * 4;
        let b = self.capture.stack.get(off..off + 4)?;
        Some(u32::from_le_bytes([(b[0])?, (b[1])?, (b[2])?, (b[3])?]))
    }
}

/// Where a node's bits live.
#[derive(Debug, Clone, Copy)]
enum Loc {
    Word(Option<u32>),
    Mem(u32),
}

fn bits_from_cells(cells: &[Cell], offset: u32, width: u32) -> Result<u64, Cell> {
    let first = (offset / 8) as usize;
    let last = ((offset + width).div_ceil(8)) as usize;
    let mut v: u128 = 0;
    for (k, c) in cells[first..last].iter().enumerate() {
        match c {
            Cell::Known(b) => v |= (*b as u128) << (8 * k),
            other => return Err(*other),
        }
    }
    let shifted = v >> (offset % 8);
    Ok((shifted & ((1u128 << width) - 1)) as u64)
}

fn read_bits(view: &View, loc: Loc, offset: u32, width: u32) -> Result<u64, Cell> {
    match loc {
        Loc::Word(None) => Err(Cell::Unknown),
        Loc::Word(Some(w)) => {
            if offset + width > 32 {
                return Err(Cell::Unmapped);
            }
            Ok(((w as u64) >> offset) & ((1u64 << width) - 1))
        }
        Loc::Mem(a) => {
            let len = (offset + width).div_ceil(8);
            bits_from_cells(&view.cells(a, len), offset, width)
        }
    }
}

fn missing(c: Cell, at: Option<u32>) -> Value {
    match (c, at) {
        (Cell::Unmapped, Some(a)) => json!({ "unresolved": hex::format(a) }),
        (Cell::Unmapped, None) => json!({ "unresolved": null }),
        _ => json!({ "unknown": true }),
    }
}

fn render_bytes(cells: &[Cell]) -> Value {
    if let Some(&c) = cells.iter().find(|c| **c == Cell::Unmapped) {
        return missing(c, None);
    }
    let mut s = String::from("0x");
    let mut known = Vec::with_capacity(cells.len());
    for c in cells {
        match c {
            Cell::Known(b) => {
                s.push_str(&format!("{b:02x}"));
                known.push(*b);
            }
            _ => s.push_str("??"),
        }
    }
    let mut m = Map::new();
    m.insert("value".into(), Value::String(s));
    if known.len() == cells.len() && known.iter().all(|b| b.is_ascii_graphic() || *b == b' ') {
        m.insert("text".into(), Value::String(String::from_utf8(known).expect("ascii")));
    }
    Value::Object(m)
}

fn render_scalar(raw: u64, bits: u32, signed: bool) -> Value {
    let value = if signed && bits < 64 && raw >> (bits - 1) & 1 == 1 {
        json!((raw as i64) - (1i64 << bits))
    } else {
        json!(raw)
    };
    json!({ "value": value, "hex": format!("0x{raw:x}") })
}

/// A location written by a call of interest and replaced with a token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Output {
    pub coi: String,
    #[serde(with = "hex")]
    pub site: u32,
    pub path_id: usize,
    pub arg: String,
    #[serde(with = "hex")]
    pub address: u32,
    pub bits: u32,
    #[serde(serialize_with = "ser_hex64")]
    pub token: u64,
}

fn ser_hex64<S: Serializer>(v: &u64, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&format!("0x{v:x}"))
}

/// Token written for the `k`th output of a binary.
pub fn output_token(k: usize, bits: u32) -> u64 {
    let k = k as u64;
    match bits {
        0..=8 => 0xf0 | (k & 0xf),
        9..=16 => 0xfe00 | (k & 0xff),
        _ => 0xfeed_0000 | (k & 0xffff),
    }
}

/// Per-binary state carried between traces.
#[derive(Debug, Clone, Default)]
pub struct Feedback {
    pub shared: Overlay,
    pub outputs: Vec<Output>,
    pub conflicts: Vec<String>,
}

impl Feedback {
    fn link_for(&self, raw: u64, bits: u32) -> Option<&Output> {
        self.outputs.iter().find(|o| o.token == raw && o.bits <= bits.max(8))
    }
}

struct Walker<'a, 'b> {
    view: &'a View<'b>,
    feedback: &'a Feedback,
}

impl Walker<'_, '_> {
    fn eval(&self, node: &Node, loc: Loc, offset: u32) -> Value {
        match node {
            Node::Scalar { bits, signed } => self.scalar(loc, offset, *bits as u32, *signed),
            Node::Bits(bits) => self.scalar(loc, offset, *bits as u32, false),
            Node::Bytes(n) => match loc {
                Loc::Mem(a) => render_bytes(&self.view.cells(a + offset / 8, *n)),
                Loc::Word(None) => missing(Cell::Unknown, None),
                Loc::Word(Some(w)) => {
                    let b = w.to_le_bytes();
                    let n = (*n).min(4) as usize;
                    render_bytes(&b[..n].iter().map(|&x| Cell::Known(x)).collect::<Vec<_>>())
                }
            },
            Node::Ptr(inner) => match read_bits(self.view, loc, offset, 32) {
                Ok(addr) => {
                    let addr = addr as u32;
                    json!({ "address": hex::format(addr), "target": self.eval(inner, Loc::Mem(addr), 0) })
                }
                Err(c) => missing(c, self.at(loc, offset)),
            },
            Node::Struct(fields) => {
                let mut m = Map::new();
                for f in fields {
                    m.insert(f.name.clone(), self.eval(&f.node, loc, offset + f.offset_bits));
                }
                json!({ "fields": m })
            }
            Node::Out(inner) => {
                let current = self.eval(inner, loc, offset);
                match self.at(loc, offset) {
                    Some(a) => json!({ "output": hex::format(a), "before": current }),
                    None => json!({ "output": null, "before": current }),
                }
            }
        }
    }

    fn at(&self, loc: Loc, offset: u32) -> Option<u32> {
        match loc {
            Loc::Mem(a) => Some(a + offset / 8),
            Loc::Word(_) => None,
        }
    }

    fn scalar(&self, loc: Loc, offset: u32, bits: u32, signed: bool) -> Value {
        match read_bits(self.view, loc, offset, bits) {
            Ok(raw) => {
                let mut v = render_scalar(raw, bits, signed);
                if let Some(o) = self.feedback.link_for(raw, bits) {
                    v["linked"] = json!({ "coi": o.coi, "site": hex::format(o.site), "path_id": o.path_id, "arg": o.arg });
                }
                v
            }
            Err(c) => missing(c, self.at(loc, offset)),
        }
    }
}

/// Renders every argument of `def` from a capture.
pub fn extract_arguments(def: &ArgDef, view: &View, feedback: &Feedback) -> Vec<(String, Value)> {
    let w = Walker { view, feedback };
    def.args
        .iter()
        .enumerate()
        .map(|(i, a)| (a.name.clone(), w.eval(&a.node, Loc::Word(view.arg_word(i)), 0)))
        .collect()
}

/// Writes a token into every output location reachable from the capture.
pub fn apply_feedback(def: &ArgDef, view: &View, feedback: &mut Feedback, site: u32) {
    for (arg, addr, bits) in output_locations(def, view) {
        let token = output_token(feedback.outputs.len(), bits);
        let bytes = bits.div_ceil(8);
        let new: Vec<u8> = token.to_le_bytes()[..bytes as usize].to_vec();
        let prior: Vec<Option<u8>> = (0..bytes).map(|k| feedback.shared.get(&(addr + k)).copied().flatten()).collect();
        if prior.iter().any(|b| b.is_some()) {
            let msg = format!("output at 0x{addr:x} from {} overwrites an earlier output", def.coi);
            log::warn!("{msg}");
            feedback.conflicts.push(msg);
        }
        for (k, b) in new.iter().enumerate() {
            feedback.shared.insert(addr + k as u32, Some(*b));
        }
        feedback.outputs.push(Output {
            coi: def.coi.clone(),
            site,
            path_id: view.capture.path_id,
            arg,
            address: addr,
            bits,
            token,
        });
    }
}

/// Argument name, address and width of every output location reachable in `view`.
pub fn output_locations(def: &ArgDef, view: &View) -> Vec<(String, u32, u32)> {
    let mut found = Vec::new();
    for (i, a) in def.args.iter().enumerate() {
        collect_outputs(&a.node, view, Loc::Word(view.arg_word(i)), 0, &a.name, &mut found);
    }
    found
}

/// The token bytes an earlier output left at each location written by the call in `view`.
pub fn replayed_outputs(def: &ArgDef, view: &View, outputs: &[Output], site: u32) -> Vec<(u32, Vec<u8>)> {
    output_locations(def, view)
        .into_iter()
        .filter_map(|(_, addr, bits)| {
            let o = outputs.iter().find(|o| o.site == site && o.address == addr && o.bits == bits)?;
            Some((addr, o.token.to_le_bytes()[..bits.div_ceil(8) as usize].to_vec()))
        })
        .collect()
}

fn collect_outputs(node: &Node, view: &View, loc: Loc, offset: u32, name: &str, out: &mut Vec<(String, u32, u32)>) {
    match node {
        Node::Out(inner) => {
            if let Loc::Mem(a) = loc {
                out.push((name.to_string(), a + offset / 8, inner.size_bits().max(8)));
            }
        }
        Node::Ptr(inner) => {
            if let Ok(addr) = read_bits(view, loc, offset, 32) {
                collect_outputs(inner, view, Loc::Mem(addr as u32), 0, name, out);
            }
        }
        Node::Struct(fields) => {
            for f in fields {
                let n = format!("{name}.{}", f.name);
                collect_outputs(&f.node, view, loc, offset + f.offset_bits, &n, out);
            }
        }
        _ => {}
    }
}

/// Definitions keyed by call name, in pack order.
pub type ArgDefs = BTreeMap<String, ArgDef>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn passkey_definition_parses() {
        let d = ArgDef::parse(
            "t",
            r#"{"coi":"sd_ble_opt_set","args":[{"name":"opt_id","type":"u32"},
                {"name":"p_opt","type":{"ptr":{"ptr":"bytes:6"}}}]}"#,
        )
        .unwrap();
        assert_eq!(d.args[1].node, Node::Ptr(Box::new(Node::Ptr(Box::new(Node::Bytes(6))))));
        assert_eq!(ArgDef::parse("t", &d.to_json()).unwrap(), d);
    }

    #[test]
    fn errors_name_the_line() {
        let e = ArgDef::parse("t", "{\"coi\":\"x\",\n\"args\":[{\"name\":\"a\",\n\"type\":\"u24\"}]}").unwrap_err();
        assert!(e.to_string().contains("line 3"), "{e}");
        assert!(ArgDef::parse("t", r#"{"coi":"x","args":[],"extra":1}"#).is_err());
        assert!(ArgDef::parse("t", r#"{"coi":"x","args":[{"name":"a","type":{"ptr":"u8","out":"u8"}}]}"#).is_err());
        assert!(ArgDef::parse("t", r#"{"coi":"x","args":[{"name":"a","type":{"struct":{"b":[3,"bytes:2"]}}}]}"#).is_err());
        assert!(ArgDef::parse("t", r#"{"coi":"x"}"#).unwrap().args.is_empty());
    }

    #[test]
    fn bitfields_round_trip() {
        let src = r#"{"coi":"x","args":[{"name":"a","type":{"struct":{"lo":[0,"bits:4"],"hi":[4,"bits:4"]}}}]}"#;
        let d = ArgDef::parse("t", src).unwrap();
        assert_eq!(serde_json::to_string(&d).unwrap(), src);
    }

    #[test]
    fn bit_extraction() {
        let cells = [Cell::Known(0xab), Cell::Known(0xcd)];
        assert_eq!(bits_from_cells(&cells, 0, 4), Ok(0xb));
        assert_eq!(bits_from_cells(&cells, 4, 8), Ok(0xda));
        assert_eq!(bits_from_cells(&cells, 0, 16), Ok(0xcdab));
        assert_eq!(bits_from_cells(&[Cell::Known(1), Cell::Unknown], 0, 16), Err(Cell::Unknown));
    }

    #[test]
    fn tokens_fit_their_width() {
        assert_eq!(output_token(0, 16), 0xfe00);
        assert_eq!(output_token(3, 8), 0xf3);
        assert_eq!(output_token(1, 32), 0xfeed_0001);
    }
}
