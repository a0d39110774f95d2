//! Stage-tagged diagnostics and hex address formatting for reports.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Image,
    DataId,
    Funcs,
    Coi,
    Trace,
    Argdefs,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Diagnostic {
    pub stage: Stage,
    pub kind: String,
    #[serde(with = "hex::opt", default, skip_serializing_if = "Option::is_none")]
    pub address: Option<u32>,
    pub message: String,
}

impl Diagnostic {
    pub fn new(stage: Stage, kind: &str, address: Option<u32>, message: impl Into<String>) -> Diagnostic {
        Diagnostic { stage, kind: kind.to_string(), address, message: message.into() }
    }
}

/// Serde adapters writing addresses as `"0x..."` strings.
pub mod hex {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn format(v: u32) -> String {
        format!("0x{v:x}")
    }

    pub fn parse(s: &str) -> Option<u32> {
        let s = s.trim();
        match s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
            Some(h) => u32::from_str_radix(h, 16).ok(),
            None => s.parse().ok(),
        }
    }

    pub fn serialize<S: Serializer>(v: &u32, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format(*v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u32, D::Error> {
        let s = String::deserialize(d)?;
        parse(&s).ok_or_else(|| D::Error::custom(format!("bad address {s:?}")))
    }

    pub mod opt {
        use super::*;

        pub fn serialize<S: Serializer>(v: &Option<u32>, s: S) -> Result<S::Ok, S::Error> {
            match v {
                Some(v) => s.serialize_str(&format(*v)),
                None => s.serialize_none(),
            }
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<u32>, D::Error> {
            match Option::<String>::deserialize(d)? {
                Some(s) => parse(&s).map(Some).ok_or_else(|| D::Error::custom(format!("bad address {s:?}"))),
                None => Ok(None),
            }
        }
    }

    pub mod vec {
        use super::*;
        use serde::ser::SerializeSeq;

        pub fn serialize<S: Serializer>(v: &[u32], s: S) -> Result<S::Ok, S::Error> {
            let mut seq = s.serialize_seq(Some(v.len()))?;
            for a in v {
                seq.serialize_element(&format(*a))?;
            }
            seq.end()
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u32>, D::Error> {
            Vec::<String>::deserialize(d)?
                .iter()
                .map(|s| parse(s).ok_or_else(|| D::Error::custom(format!("bad address {s:?}"))))
                .collect()
        }
    }
}
