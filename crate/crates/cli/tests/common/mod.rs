#![allow(dead_code)]

use std::path::{Path, PathBuf};

use thumbscope::analyze::AnalysisConfig;
use thumbscope::pack::Pack;
use thumbscope_cli::RunConfig;
use thumbscope_fixtures::firmware;

pub fn pack_dir(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../packs").join(name)
}

pub fn nordic() -> Pack {
    Pack::load(&pack_dir("nordic")).unwrap()
}

/// Writes every corpus fixture as `<name>.bin` and returns the paths.
pub fn write_corpus(dir: &Path) -> Vec<PathBuf> {
    firmware::corpus()
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let p = dir.join(format!("{i:02}-{}.bin", f.name));
            std::fs::write(&p, f.bytes()).unwrap();
            p
        })
        .collect()
}

pub fn run_config(out: &Path, workers: usize) -> RunConfig {
    RunConfig { analysis: AnalysisConfig::default(), workers, out: out.to_path_buf(), dump_structure: false }
}

/// Report file names and contents, sorted by name.
pub fn read_reports(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}
