//! Clang-built samples against their unstripped twins.

use std::collections::{BTreeMap, BTreeSet};

use thumbscope::analyze::recover_structure;
use thumbscope::coi::{find_call_sites, match_function, FunctionPattern, MatchError};
use thumbscope_fixtures::compiled::{samples, CompiledSample};

const MEMSET_PATTERN: &str = include_str!("../../../packs/nordic/patterns/memset.json");

struct Score {
    truth: usize,
    found: usize,
    missed: Vec<(u32, String)>,
    effective_fp: Vec<u32>,
    reported: usize,
}

impl Score {
    fn tpr(&self) -> f64 {
        self.found as f64 / self.truth as f64
    }

    fn efpr(&self) -> f64 {
        self.effective_fp.len() as f64 / self.reported as f64
    }
}

fn score(s: &CompiledSample) -> Score {
    let rec = recover_structure(&s.image, None).unwrap();
    let got: BTreeSet<u32> = rec.functions.blocks.iter().map(|b| b.start).collect();
    let truth: BTreeSet<u32> = s.functions.keys().copied().collect();
    let missed = truth.difference(&got).map(|a| (*a, s.functions[a].clone())).collect();
    let effective_fp = got
        .difference(&truth)
        .filter(|&&a| {
            let b = rec.functions.by_start(a).unwrap();
            !b.xrefs_in.is_empty() || !b.xrefs_out.is_empty()
        })
        .copied()
        .collect();
    Score { truth: truth.len(), found: truth.intersection(&got).count(), missed, effective_fp, reported: got.len() }
}

#[test]
fn code_base_is_recovered() {
    for s in samples() {
        let rec = recover_structure(&s.image, None).unwrap();
        assert_eq!(rec.img.code_base(), s.base, "{}", s.name);
    }
}

#[test]
fn function_starts_against_symbol_table() {
    for s in samples() {
        let sc = score(&s);
        eprintln!(
            "{}: {} true starts, {} recovered, TPR {:.3}, effective FPs {} of {} ({:.4}); missed {:x?}; effective FPs at {:x?}",
            s.name,
            sc.truth,
            sc.found,
            sc.tpr(),
            sc.effective_fp.len(),
            sc.reported,
            sc.efpr(),
            sc.missed,
            sc.effective_fp
        );
        assert!(sc.tpr() >= 0.95, "{}: TPR {:.3}", s.name, sc.tpr());
        assert!(sc.efpr() <= 0.015, "{}: effective FPR {:.4}", s.name, sc.efpr());
    }
}

/// Leaf functions other than memset: the decoys the pattern must reject.
fn decoys(s: &CompiledSample, leaves: &BTreeSet<u32>) -> Vec<String> {
    let memset = s.symbol("memset");
    leaves.iter().filter(|a| **a != memset).filter_map(|a| s.functions.get(a).cloned()).collect()
}

#[test]
fn memset_pattern_is_unique_across_variants() {
    let pattern = FunctionPattern::parse(MEMSET_PATTERN).unwrap();
    for s in samples() {
        let rec = recover_structure(&s.image, None).unwrap();
        let leaves: BTreeSet<u32> = rec.functions.blocks.iter().filter(|b| b.call_depth == 0).map(|b| b.start).collect();
        let decoys = decoys(&s, &leaves);
        assert!(decoys.len() >= 10, "{}: only {} decoy leaves: {decoys:?}", s.name, decoys.len());
        let got = match_function(&rec.functions, &rec.listing, &rec.img, &pattern, &BTreeMap::new());
        assert_eq!(got, Ok(s.symbol("memset")), "{}", s.name);
    }
}

#[test]
fn pattern_matching_never_resolves_ties() {
    // Overwrite a called decoy with memset's own body: two blocks now behave
    // identically at the same depth and the matcher must say so.
    let pattern = FunctionPattern::parse(MEMSET_PATTERN).unwrap();
    for s in samples() {
        let memset = s.symbol("memset");
        let decoy = s.symbol("fill_until");
        let rec = recover_structure(&s.image, None).unwrap();
        let (m, d) = (rec.functions.by_start(memset).unwrap(), rec.functions.by_start(decoy).unwrap());
        assert!(m.end - m.start <= d.end - d.start, "{}: decoy too small", s.name);
        let mut image = s.image.clone();
        let body = s.image[(m.start - s.base) as usize..(m.end - s.base) as usize].to_vec();
        let at = (decoy - s.base) as usize;
        image[at..at + body.len()].copy_from_slice(&body);
        let rec = recover_structure(&image, Some(s.base)).unwrap();
        match match_function(&rec.functions, &rec.listing, &rec.img, &pattern, &BTreeMap::new()) {
            Err(MatchError::AmbiguousMatch { starts, .. }) => {
                assert_eq!(starts, vec![memset.min(decoy), memset.max(decoy)], "{}", s.name)
            }
            other => panic!("{}: expected an ambiguous match, got {other:?}", s.name),
        }
    }
}

#[test]
fn memset_call_sites_match_relocations() {
    let pattern = FunctionPattern::parse(MEMSET_PATTERN).unwrap();
    for s in samples() {
        let rec = recover_structure(&s.image, None).unwrap();
        let start = match_function(&rec.functions, &rec.listing, &rec.img, &pattern, &BTreeMap::new()).unwrap();
        let sites: Vec<u32> =
            find_call_sites(&rec.functions, &rec.listing, &rec.target_sets, "memset", start).iter().map(|c| c.site).collect();
        assert!(sites.len() >= 3, "{}: {sites:x?}", s.name);
        assert_eq!(sites, s.calls_to("memset"), "{}", s.name);
    }
}

#[test]
fn passkey_and_handle_chain_in_compiled_code() {
    use thumbscope::analyze::{analyze_binary, AnalysisConfig};
    use thumbscope::pack::Pack;

    let dir = std::path::PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../packs/nordic");
    let pack = Pack::load(&dir).unwrap();
    for s in samples() {
        let r = analyze_binary(&s.image, &pack, &AnalysisConfig::default()).unwrap().report;
        eprintln!("{}", r.to_json());
        let opt: Vec<_> = r.cois.iter().filter(|c| c.coi == "sd_ble_opt_set").collect();
        assert_eq!(opt.len(), 1, "{}", s.name);
        assert_eq!(opt[0].args["opt_id"]["value"], 34, "{}", s.name);
        assert_eq!(opt[0].args["p_opt"]["target"]["target"]["text"], "123456", "{}", s.name);

        let chars: Vec<_> = r.cois.iter().filter(|c| c.coi == "sd_ble_gatts_characteristic_add").collect();
        assert!(!chars.is_empty(), "{}", s.name);
        for c in chars {
            assert_eq!(c.args["service_handle"]["linked"]["coi"], "sd_ble_gatts_service_add", "{}", s.name);
        }
    }
}

#[test]
fn function_mode_traces_every_memset_call() {
    use thumbscope::analyze::{analyze_binary, AnalysisConfig, Mode};
    use thumbscope::pack::Pack;

    let dir = std::path::PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../packs/common");
    let pack = Pack::load(&dir).unwrap();
    let cfg = AnalysisConfig { mode: Mode::Function, ..AnalysisConfig::default() };
    for s in samples() {
        let r = analyze_binary(&s.image, &pack, &cfg).unwrap().report;
        let sites: BTreeSet<u32> = r.cois.iter().map(|c| c.site).collect();
        let truth = s.calls_to("memset");
        assert!(sites.iter().all(|a| truth.contains(a)), "{}: {sites:x?} vs {truth:x?}", s.name);
        for site in truth {
            let (_, owner) = s.functions.range(..=site).last().unwrap();
            if owner == "command" {
                // Only reachable once the UART interrupt has filled the receive
                // ring; from reset the ring is empty and the idle loop is cut.
                assert!(r.diagnostics.iter().any(|d| d.address == Some(site)), "{}: {site:#x} dropped silently", s.name);
            } else {
                assert!(sites.contains(&site), "{}: memset call in {owner} at {site:#x} not traced", s.name);
            }
        }
        for c in &r.cois {
            assert_eq!(c.coi, "memset");
            assert_eq!(c.args["value"]["value"], 0, "{}: {:#x}", s.name, c.site);
            let len = c.args["len"]["value"].as_u64().unwrap_or_else(|| panic!("{}: {:#x} len {}", s.name, c.site, c.args["len"]));
            assert!([64, 128].contains(&len) || len % 8 == 0, "{}: {:#x} len {len}", s.name, c.site);
        }
    }
}
