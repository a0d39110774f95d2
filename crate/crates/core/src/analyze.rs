//! The whole pipeline for one binary: image, data, functions, calls of
//! interest, traces and argument reports.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::argdefs::{apply_feedback, extract_arguments, replayed_outputs, ArgDef, Feedback, Output, View};
use crate::coi::{find_call_sites, find_svcs, match_function, CoiKind, CoiSite, MatchError};
use crate::dataid::{builtin_helpers, identify_inline_data, BranchTargetSet};
use crate::diag::{hex, Diagnostic, Stage};
use crate::exec::Model;
use crate::funcs::{estimate_boundaries, FunctionBlock, Functions};
use crate::image::{identify_code_base, DataSource, FirmwareImage, ImageError};
use crate::isa::sweep;
use crate::listing::Listing;
use crate::pack::Pack;
use crate::trace::{enumerate_paths, CallPath, CoiCapture, Replay, TraceConfig, Tracer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Svc,
    Function,
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Mode, String> {
        match s {
            "svc" => Ok(Mode::Svc),
            "function" => Ok(Mode::Function),
            _ => Err(format!("unknown mode {s:?} (expected svc or function)")),
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct AnalysisConfig {
    pub mode: Mode,
    pub trace: TraceConfig,
    /// Overrides code base recovery.
    pub code_base: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    Partial,
    Timeout,
}

#[derive(Debug, Clone, Serialize)]
pub struct CoiEntry {
    pub coi: String,
    pub kind: CoiKind,
    #[serde(with = "hex")]
    pub site: u32,
    pub path_id: usize,
    pub path: CallPath,
    pub args: Map<String, Value>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub sha256: String,
    pub size: usize,
    #[serde(with = "hex")]
    pub code_base: u32,
    pub pack: String,
    pub mode: Mode,
    pub status: Status,
    pub cois: Vec<CoiEntry>,
    pub outputs: Vec<Output>,
    pub diagnostics: Vec<Diagnostic>,
}

impl Report {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serialises");
        s.push('\n');
        s
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DataRange {
    #[serde(with = "hex")]
    pub start: u32,
    #[serde(with = "hex")]
    pub end: u32,
    pub source: DataSource,
}

#[derive(Debug, Clone, Serialize)]
pub struct MatchedFunction {
    pub pattern: String,
    #[serde(with = "hex")]
    pub start: u32,
}

/// Recovered structure, written alongside the report on request.
#[derive(Debug, Clone, Serialize)]
pub struct Structure {
    pub sha256: String,
    #[serde(with = "hex")]
    pub code_base: u32,
    #[serde(with = "hex::opt")]
    pub data_segment_start: Option<u32>,
    pub data: Vec<DataRange>,
    pub target_sets: Vec<BranchTargetSet>,
    pub helpers: Vec<MatchedFunction>,
    pub functions: Vec<FunctionBlock>,
    pub matched: Vec<MatchedFunction>,
    pub sites: Vec<CoiSite>,
}

impl Structure {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("structure serialises");
        s.push('\n');
        s
    }
}

#[derive(Debug, Clone)]
pub struct Analysis {
    pub report: Report,
    pub structure: Structure,
}

#[derive(Debug, thiserror::Error)]
pub enum AnalysisError {
    #[error(transparent)]
    Image(#[from] ImageError),
}

/// Everything recovered before calls of interest are considered.
pub struct Recovered {
    pub img: FirmwareImage,
    pub listing: Listing,
    pub data_segment: Option<(u32, u32)>,
    pub target_sets: Vec<BranchTargetSet>,
    pub helpers: Vec<(String, u32)>,
    pub functions: Functions,
    pub diagnostics: Vec<Diagnostic>,
}

/// Code base, inline data and function blocks.
pub fn recover_structure(bytes: &[u8], code_base: Option<u32>) -> Result<Recovered, ImageError> {
    let mut img = FirmwareImage::from_bytes(bytes.to_vec())?;
    let mut diagnostics = Vec::new();
    let base = match code_base {
        Some(b) => b,
        None => {
            let cb = identify_code_base(&img, &sweep(img.bytes(), 0))?;
            if cb.ambiguous {
                let msg = format!("code base candidates tie; alternatives {:x?}", cb.alternatives);
                diagnostics.push(Diagnostic::new(Stage::Image, "ambiguous_base", Some(cb.base), msg));
            }
            cb.base
        }
    };
    img.rebase(base)?;
    let mut listing = Listing::build(&img);
    let d = identify_inline_data(&mut img, &mut listing, &builtin_helpers());
    diagnostics.extend(d.diagnostics);
    let functions = estimate_boundaries(&img, &listing, &d.target_sets);
    diagnostics.extend(functions.diagnostics.iter().cloned());
    Ok(Recovered {
        img,
        listing,
        data_segment: d.data_segment,
        target_sets: d.target_sets,
        helpers: d.helpers,
        functions,
        diagnostics,
    })
}

/// Diagnostic kinds that make a report partial.
const FAILURE_KINDS: [&str; 6] = ["aborted", "no_match", "ambiguous_match", "unreachable_site", "deny_listed_site", "timeout"];

pub fn sha256_hex(bytes: &[u8]) -> String {
    ::hex::encode(Sha256::digest(bytes))
}

/// Runs the pipeline on one image.
pub fn analyze_binary(bytes: &[u8], pack: &Pack, cfg: &AnalysisConfig) -> Result<Analysis, AnalysisError> {
    let sha256 = sha256_hex(bytes);
    let rec = recover_structure(bytes, cfg.code_base.or(pack.code_base))?;
    let mut diags: BTreeSet<Diagnostic> = rec.diagnostics.iter().cloned().collect();
    let mut matched = Vec::new();

    let mut models: BTreeMap<u32, Model> = BTreeMap::new();
    for (name, model) in &pack.models {
        let pattern = pack.pattern(name).expect("validated pack");
        match match_function(&rec.functions, &rec.listing, &rec.img, pattern, &BTreeMap::new()) {
            Ok(start) => {
                models.insert(start, *model);
                matched.push(MatchedFunction { pattern: name.clone(), start });
            }
            Err(MatchError::NoMatch(_)) => log::debug!("{sha256}: no function matches {name}"),
            Err(e @ MatchError::AmbiguousMatch { .. }) => {
                diags.insert(Diagnostic::new(Stage::Coi, "ambiguous_model", None, e.to_string()));
            }
        }
    }

    let mut producers: BTreeMap<u32, &ArgDef> = BTreeMap::new();
    let mut feedback = Feedback::default();
    let mut cois = Vec::new();
    let mut all_sites = Vec::new();
    let mut timed_out = false;

    for def in selected_defs(pack, cfg.mode) {
        let sites = match cfg.mode {
            Mode::Svc => {
                let n = pack.svc_number(&def.coi).expect("selected by svc");
                find_svcs(&rec.listing, &BTreeSet::from([n]))
            }
            Mode::Function => {
                let pattern = pack.pattern(&def.coi).expect("selected by pattern");
                match match_function(&rec.functions, &rec.listing, &rec.img, pattern, &models) {
                    Ok(start) => {
                        matched.push(MatchedFunction { pattern: def.coi.clone(), start });
                        find_call_sites(&rec.functions, &rec.listing, &rec.target_sets, &def.coi, start)
                    }
                    Err(e) => {
                        let kind = match e {
                            MatchError::NoMatch(_) => "no_match",
                            MatchError::AmbiguousMatch { .. } => "ambiguous_match",
                        };
                        diags.insert(Diagnostic::new(Stage::Coi, kind, None, e.to_string()));
                        Vec::new()
                    }
                }
            }
        };
        for site in sites {
            all_sites.push(site.clone());
            match rec.functions.containing(site.site) {
                None => {
                    let msg = format!("{} site lies outside every function block", def.coi);
                    diags.insert(Diagnostic::new(Stage::Trace, "unreachable_site", Some(site.site), msg));
                    continue;
                }
                Some(b) if b.deny_listed => {
                    let msg = format!("{} site lies in a deny-listed block", def.coi);
                    diags.insert(Diagnostic::new(Stage::Trace, "deny_listed_site", Some(site.site), msg));
                    continue;
                }
                Some(_) => {}
            }
            let paths = enumerate_paths(site.site, &rec.functions, cfg.trace.max_paths);
            if paths.truncated {
                let msg = format!("more than {} paths reach {}", cfg.trace.max_paths, def.coi);
                diags.insert(Diagnostic::new(Stage::Trace, "paths_truncated", Some(site.site), msg));
            }
            for (path_id, path) in paths.paths.iter().enumerate() {
                let (outputs, shared) = (&feedback.outputs, &feedback.shared);
                let img = &rec.img;
                let replay_fn = |cap: &CoiCapture| match producers.get(&cap.site) {
                    Some(d) => replayed_outputs(d, &View { img, capture: cap, shared }, outputs, cap.site),
                    None => Vec::new(),
                };
                let replay = Replay { sites: outputs.iter().map(|o| o.site).collect(), outputs: &replay_fn };
                let tracer = Tracer {
                    img,
                    listing: &rec.listing,
                    functions: &rec.functions,
                    models: &models,
                    config: cfg.trace,
                    replay: Some(&replay),
                };
                let res = tracer.forward_trace(path, path_id, shared);
                timed_out |= res.timed_out;
                diags.extend(res.diagnostics);
                if res.truncated {
                    let msg = format!("path {path_id}: forks dropped by the fork cap or loop guard");
                    diags.insert(Diagnostic::new(Stage::Trace, "forks_truncated", Some(site.site), msg));
                }
                let snapshot = feedback.shared.clone();
                for cap in &res.captures {
                    let view = View { img: &rec.img, capture: cap, shared: &snapshot };
                    let args = extract_arguments(def, &view, &feedback).into_iter().collect();
                    cois.push(CoiEntry {
                        coi: def.coi.clone(),
                        kind: site.kind.clone(),
                        site: site.site,
                        path_id,
                        path: path.clone(),
                        args,
                    });
                    apply_feedback(def, &view, &mut feedback, site.site);
                    producers.insert(site.site, def);
                }
            }
        }
    }
    for c in &feedback.conflicts {
        diags.insert(Diagnostic::new(Stage::Argdefs, "feedback_conflict", None, c.clone()));
    }

    let diagnostics: Vec<Diagnostic> = diags.into_iter().collect();
    let status = if timed_out {
        Status::Timeout
    } else if diagnostics.iter().any(|d| FAILURE_KINDS.contains(&d.kind.as_str())) {
        Status::Partial
    } else {
        Status::Ok
    };
    let structure = Structure {
        sha256: sha256.clone(),
        code_base: rec.img.code_base(),
        data_segment_start: rec.data_segment.map(|(s, _)| s),
        data: rec.img.data_ranges().into_iter().map(|(start, end, source)| DataRange { start, end, source }).collect(),
        target_sets: rec.target_sets.clone(),
        helpers: rec.helpers.iter().map(|(n, a)| MatchedFunction { pattern: n.clone(), start: *a }).collect(),
        functions: rec.functions.blocks.clone(),
        matched,
        sites: all_sites,
    };
    let report = Report {
        sha256,
        size: bytes.len(),
        code_base: rec.img.code_base(),
        pack: pack.name.clone(),
        mode: cfg.mode,
        status,
        cois,
        outputs: feedback.outputs,
        diagnostics,
    };
    Ok(Analysis { report, structure })
}

/// Definitions applicable in `mode`, in pack order.
fn selected_defs(pack: &Pack, mode: Mode) -> impl Iterator<Item = &ArgDef> {
    pack.argdefs.iter().filter(move |d| match mode {
        Mode::Svc => pack.svc_number(&d.coi).is_some(),
        Mode::Function => pack.pattern(&d.coi).is_some(),
    })
}
