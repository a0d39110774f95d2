//! Vendor packs: svc numbers, function patterns, native models and argument
//! definitions for one SDK family.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use serde_json::Map;

use crate::argdefs::{ArgDef, ArgDefError};
use crate::coi::FunctionPattern;
use crate::diag::hex;
use crate::exec::Model;

#[derive(Debug, Clone, Default)]
pub struct Pack {
    pub name: String,
    /// Call name and svc number, in file order.
    pub svc: Vec<(String, u8)>,
    pub patterns: Vec<FunctionPattern>,
    /// Pattern name and the model replacing matched functions during tracing.
    pub models: Vec<(String, Model)>,
    /// Definitions in pack order; this order drives tracing and feedback.
    pub argdefs: Vec<ArgDef>,
    pub code_base: Option<u32>,
}

#[derive(Debug, thiserror::Error)]
pub enum PackError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {message}")]
    Invalid { path: String, message: String },
    #[error(transparent)]
    ArgDef(#[from] ArgDefError),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    name: String,
    #[serde(default)]
    svc: Map<String, serde_json::Value>,
    #[serde(default)]
    patterns: Vec<String>,
    #[serde(default)]
    models: Map<String, serde_json::Value>,
    #[serde(default)]
    argdefs: Vec<String>,
    #[serde(default)]
    code_base: Option<String>,
}

fn read(path: &Path) -> Result<String, PackError> {
    std::fs::read_to_string(path).map_err(|source| PackError::Io { path: path.display().to_string(), source })
}

fn invalid(path: &Path, message: impl Into<String>) -> PackError {
    PackError::Invalid { path: path.display().to_string(), message: message.into() }
}

impl Pack {
    /// Loads `<dir>/pack.json` and the files it lists.
    pub fn load(dir: &Path) -> Result<Pack, PackError> {
        let manifest_path = dir.join("pack.json");
        let m: Manifest = serde_json::from_str(&read(&manifest_path)?).map_err(|e| invalid(&manifest_path, e.to_string()))?;
        let mut pack = Pack { name: m.name, ..Pack::default() };
        for (name, v) in m.svc {
            let n = v
                .as_str()
                .and_then(hex::parse)
                .or_else(|| v.as_u64().map(|n| n as u32))
                .and_then(|n| u8::try_from(n).ok())
                .ok_or_else(|| invalid(&manifest_path, format!("svc number for {name} must fit in a byte")))?;
            pack.svc.push((name, n));
        }
        for rel in &m.patterns {
            let p: PathBuf = dir.join(rel);
            pack.patterns.push(FunctionPattern::parse(&read(&p)?).map_err(|e| invalid(&p, e))?);
        }
        for (name, v) in m.models {
            let model: Model = serde_json::from_value(v).map_err(|e| invalid(&manifest_path, format!("model for {name}: {e}")))?;
            pack.models.push((name, model));
        }
        for rel in &m.argdefs {
            let p = dir.join(rel);
            pack.argdefs.push(ArgDef::parse(&p.display().to_string(), &read(&p)?)?);
        }
        pack.code_base = match m.code_base {
            Some(s) => Some(hex::parse(&s).ok_or_else(|| invalid(&manifest_path, format!("bad code_base {s:?}")))?),
            None => None,
        };
        pack.validate().map_err(|e| invalid(&manifest_path, e))?;
        Ok(pack)
    }

    pub fn validate(&self) -> Result<(), String> {
        for d in &self.argdefs {
            if self.svc_number(&d.coi).is_none() && self.pattern(&d.coi).is_none() {
                return Err(format!("argument definition for unknown call {}", d.coi));
            }
        }
        for (name, _) in &self.models {
            if self.pattern(name).is_none() {
                return Err(format!("model {name} has no pattern"));
            }
        }
        Ok(())
    }

    pub fn svc_number(&self, name: &str) -> Option<u8> {
        self.svc.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn pattern(&self, name: &str) -> Option<&FunctionPattern> {
        self.patterns.iter().find(|p| p.name == name)
    }
}
