//! Corpus driver: runs the pipeline over many binaries on a worker pool and
//! writes one `<sha256>.json` report per distinct input.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::Serialize;
use thumbscope::analyze::{analyze_binary, sha256_hex, AnalysisConfig, Status};
use thumbscope::pack::Pack;

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub analysis: AnalysisConfig,
    pub workers: usize,
    pub out: PathBuf,
    pub dump_structure: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Summary {
    pub ok: usize,
    pub partial: usize,
    pub failed: usize,
    pub timeout: usize,
    /// Inputs skipped because an identical file was already analysed.
    pub duplicates: usize,
}

impl Summary {
    pub fn reports(&self) -> usize {
        self.ok + self.partial + self.timeout
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case", tag = "outcome")]
pub enum Outcome {
    Report { sha256: String, status: Status },
    Failed { error: String },
    /// The analysis panicked; treated as an internal invariant violation.
    Crashed { error: String },
}

#[derive(Debug, Clone, Serialize)]
pub struct FileResult {
    pub path: PathBuf,
    #[serde(flatten)]
    pub outcome: Outcome,
}

#[derive(Debug, Clone, Serialize)]
pub struct CorpusResult {
    pub summary: Summary,
    pub files: Vec<FileResult>,
}

impl CorpusResult {
    pub fn crashed(&self) -> bool {
        self.files.iter().any(|f| matches!(f.outcome, Outcome::Crashed { .. }))
    }

    /// Zero iff at least one report was written and nothing crashed.
    pub fn exit_code(&self) -> i32 {
        if self.summary.reports() > 0 && !self.crashed() {
            0
        } else {
            1
        }
    }
}

/// Expands directories into the `.bin` files beneath them; plain files are
/// taken as given. The result is sorted so dispatch order never depends on
/// directory iteration order.
pub fn collect_inputs(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            for entry in walkdir::WalkDir::new(p).follow_links(true) {
                let entry = entry.with_context(|| format!("walking {}", p.display()))?;
                if entry.file_type().is_file() && entry.path().extension().is_some_and(|e| e.eq_ignore_ascii_case("bin")) {
                    files.push(entry.into_path());
                }
            }
        } else if p.is_file() {
            files.push(p.clone());
        } else {
            bail!("{}: no such file or directory", p.display());
        }
    }
    files.sort();
    files.dedup();
    Ok(files)
}

pub fn analyze_corpus(inputs: &[PathBuf], pack: &Pack, cfg: &RunConfig) -> Result<CorpusResult> {
    if cfg.workers == 0 {
        bail!("worker count must be at least 1");
    }
    std::fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(cfg.workers).build()?;

    // Hash first so identical inputs are analysed once and never race on
    // the same report file.
    let hashed: Vec<(PathBuf, std::io::Result<String>)> =
        pool.install(|| inputs.par_iter().map(|p| (p.clone(), std::fs::read(p).map(|b| sha256_hex(&b)))).collect());
    let mut seen = BTreeMap::new();
    let mut duplicates = 0;
    let mut jobs = Vec::new();
    for (i, (path, sha)) in hashed.iter().enumerate() {
        if let Ok(sha) = sha {
            if let Some(first) = seen.insert(sha.clone(), i) {
                log::info!("{} duplicates {}", path.display(), inputs[first].display());
                seen.insert(sha.clone(), first);
                duplicates += 1;
                continue;
            }
        }
        jobs.push(path.clone());
    }

    let files: Vec<FileResult> = pool.install(|| {
        jobs.par_iter().map(|path| FileResult { path: path.clone(), outcome: analyze_file(path, pack, cfg) }).collect()
    });

    let mut summary = Summary { duplicates, ..Summary::default() };
    for f in &files {
        match &f.outcome {
            Outcome::Report { status: Status::Ok, .. } => summary.ok += 1,
            Outcome::Report { status: Status::Partial, .. } => summary.partial += 1,
            Outcome::Report { status: Status::Timeout, .. } => summary.timeout += 1,
            Outcome::Failed { error } | Outcome::Crashed { error } => {
                log::warn!("{}: {error}", f.path.display());
                summary.failed += 1;
            }
        }
    }
    Ok(CorpusResult { summary, files })
}

fn analyze_file(path: &Path, pack: &Pack, cfg: &RunConfig) -> Outcome {
    let bytes = match std::fs::read(path) {
        Ok(b) => b,
        Err(e) => return Outcome::Failed { error: format!("cannot read: {e}") },
    };
    let analysis = match catch_unwind(AssertUnwindSafe(|| analyze_binary(&bytes, pack, &cfg.analysis))) {
        Ok(Ok(a)) => a,
        Ok(Err(e)) => return Outcome::Failed { error: e.to_string() },
        Err(panic) => {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "analysis panicked".into());
            return Outcome::Crashed { error: msg };
        }
    };
    let report = &analysis.report;
    let write = || -> std::io::Result<()> {
        std::fs::write(cfg.out.join(format!("{}.json", report.sha256)), report.to_json())?;
        if cfg.dump_structure {
            std::fs::write(cfg.out.join(format!("{}.structure.json", report.sha256)), analysis.structure.to_json())?;
        }
        Ok(())
    };
    match write() {
        Ok(()) => {
            log::info!("{}: {:?}, {} COI captures", path.display(), report.status, report.cois.len());
            Outcome::Report { sha256: report.sha256.clone(), status: report.status }
        }
        Err(e) => Outcome::Failed { error: format!("cannot write report: {e}") },
    }
}

/// Parses `0x1b000` or `1b000`.
pub fn parse_hex_u32(s: &str) -> Result<u32, String> {
    let digits = s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")).unwrap_or(s);
    u32::from_str_radix(digits, 16).map_err(|e| format!("{s:?} is not a 32-bit hex address: {e}"))
}
