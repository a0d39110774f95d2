use std::collections::BTreeSet;

use thumbscope::dataid::{builtin_helpers, identify_inline_data};
use thumbscope::funcs::{estimate_boundaries, Functions};
use thumbscope::image::FirmwareImage;
use thumbscope::listing::Listing;
use thumbscope_fixtures::firmware::{self, Fixture};

fn functions(f: &Fixture) -> Functions {
    let mut img = FirmwareImage::from_bytes(f.bytes().to_vec()).unwrap();
    img.rebase(f.base()).unwrap();
    let mut listing = Listing::build(&img);
    let d = identify_inline_data(&mut img, &mut listing, &builtin_helpers());
    estimate_boundaries(&img, &listing, &d.target_sets)
}

#[test]
fn starts_match_every_fixture() {
    for f in firmware::corpus() {
        let fs = functions(&f);
        let got: BTreeSet<u32> = fs.starts().into_iter().collect();
        let truth = f.function_starts();
        let missing: Vec<_> = truth.difference(&got).collect();
        assert!(missing.is_empty(), "{}: missing {missing:x?}", f.name);
        // Trailing constant data may decode as a fragment; it must stay out of the call graph.
        let effective: Vec<_> = got
            .difference(&truth)
            .filter(|&&s| {
                let b = fs.by_start(s).unwrap();
                !b.xrefs_in.is_empty() || !b.xrefs_out.is_empty()
            })
            .collect();
        assert!(effective.is_empty(), "{}: false starts in call graph {effective:x?}", f.name);
    }
}

#[test]
fn conditional_bypass_keeps_second_exit() {
    let f = firmware::function_corpus_fixture();
    let fs = functions(&f);
    let b = fs.by_start(0x182b0).unwrap();
    assert_eq!(b.end, 0x182d2);
    let c = fs.by_start(0x182d4).unwrap();
    assert_eq!(c.start, f.function("functionC"));
}

#[test]
fn loops_without_calls_are_deny_listed() {
    let f = firmware::function_corpus_fixture();
    let fs = functions(&f);
    let denied: BTreeSet<u32> = fs.blocks.iter().filter(|b| b.deny_listed).map(|b| b.start).collect();
    let expect: BTreeSet<u32> = ["nmi_handler", "hardfault_handler", "default_handler", "error_a", "error_b"]
        .iter()
        .map(|n| f.function(n))
        .collect();
    assert_eq!(denied, expect);
}

#[test]
fn call_depths() {
    let f = firmware::function_corpus_fixture();
    let fs = functions(&f);
    let depth = |n: &str| fs.by_start(f.function(n)).unwrap().call_depth;
    assert_eq!(depth("clamp"), 0);
    assert_eq!(depth("functionB"), 1);
    assert_eq!(depth("sum_table"), 1);
    assert_eq!(depth("error_a"), 1);
    assert_eq!(depth("branch_only"), 2);
    assert_eq!(depth("main"), 3);
    assert_eq!(depth("reset_handler"), 4);
}
