use std::collections::BTreeSet;

use thumbscope::dataid::{builtin_helpers, identify_inline_data, DataId, TableKind};
use thumbscope::image::FirmwareImage;
use thumbscope::listing::Listing;
use thumbscope_fixtures::firmware::{self, Fixture};

fn analyse(f: &Fixture) -> (FirmwareImage, Listing, DataId) {
    let mut img = FirmwareImage::from_bytes(f.bytes().to_vec()).unwrap();
    img.rebase(f.base()).unwrap();
    let mut listing = Listing::build(&img);
    let d = identify_inline_data(&mut img, &mut listing, &builtin_helpers());
    (img, listing, d)
}

fn diff(f: &Fixture, img: &FirmwareImage) -> (Vec<u32>, Vec<u32>) {
    let truth = f.data_bytes();
    let got: BTreeSet<u32> = img.data_bytes().into_iter().collect();
    let missing = truth.difference(&got).copied().collect();
    let extra = got.difference(&truth).copied().collect();
    (missing, extra)
}

fn assert_exact(f: &Fixture) -> DataId {
    let (img, _, d) = analyse(f);
    let (missing, extra) = diff(f, &img);
    assert!(
        missing.is_empty() && extra.is_empty(),
        "{}: missing {:x?} extra {:x?}\n{:#?}",
        f.name,
        missing,
        extra,
        d.diagnostics
    );
    d
}

#[test]
fn reset_segment_is_data() {
    let f = firmware::reset_segment_fixture();
    let d = assert_exact(&f);
    assert_eq!(d.data_segment, Some((0x21000, f.base() + f.bytes().len() as u32)));
}

#[test]
fn pc_relative_literals() {
    assert_exact(&firmware::pc_relative_fixture());
}

#[test]
fn table_branch_tables() {
    let f = firmware::table_branch_fixture();
    let d = assert_exact(&f);
    let tbb = d.target_sets.iter().find(|s| s.origin == 0x2894e).unwrap();
    assert_eq!(tbb.kind, TableKind::TableBranch);
    assert_eq!(tbb.table, vec![0x28952, 0x28958]);
    assert_eq!(tbb.targets.len(), 5);
}

#[test]
fn gnu_switch_helpers() {
    let f = firmware::gnu_helper_fixture();
    let d = assert_exact(&f);
    let names: BTreeSet<&str> = d.helpers.iter().map(|(n, _)| n.as_str()).collect();
    assert!(names.contains("__gnu_thumb1_case_uqi") && names.contains("__gnu_thumb1_case_uhi"), "{names:?}");
    let sets: Vec<_> = d.target_sets.iter().filter(|s| s.kind == TableKind::SwitchHelper).collect();
    assert_eq!(sets.iter().map(|s| s.targets.len()).collect::<Vec<_>>(), vec![4, 3]);
}

#[test]
fn keil_switch_helper() {
    let f = firmware::keil_helper_fixture();
    let d = assert_exact(&f);
    let set = d.target_sets.iter().find(|s| s.kind == TableKind::SwitchHelper).unwrap();
    let expect: BTreeSet<u32> = ["Lk0", "Lk1", "Lk2", "Lkdef"].iter().map(|l| f.label(&format!(".{l}"))).collect();
    assert_eq!(set.targets.iter().copied().collect::<BTreeSet<_>>(), expect);
}

#[test]
fn pc_write_tables() {
    let f = firmware::pc_write_fixture();
    let d = assert_exact(&f);
    let set = d.target_sets.iter().find(|s| s.origin == 0x1a846).unwrap();
    assert_eq!(set.kind, TableKind::PcWrite);
    assert_eq!(set.targets.len(), 24);
    assert_eq!(set.table, vec![0x1a848, 0x1a848 + 96]);
    let wide = d.target_sets.iter().find(|s| s.origin != 0x1a846 && s.kind == TableKind::PcWrite).unwrap();
    assert_eq!(wide.targets.len(), 8);
}

#[test]
fn function_corpus_data() {
    assert_exact(&firmware::function_corpus_fixture());
}

#[test]
fn corrupt_helper_count_is_rejected() {
    // A count byte of 0x15 would stretch the table over its own case labels
    // and into the helper's entry, erasing the code that justified it.
    let f = firmware::keil_helper_fixture();
    let call = f.label(".Lktab");
    let mut bytes = f.bytes().to_vec();
    bytes[(call - f.base()) as usize] = 0x15;
    let mut img = FirmwareImage::from_bytes(bytes).unwrap();
    img.rebase(f.base()).unwrap();
    let mut listing = Listing::build(&img);
    let d = identify_inline_data(&mut img, &mut listing, &builtin_helpers());
    assert!(d.target_sets.is_empty(), "{:x?}", d.target_sets);
    assert!(d.diagnostics.iter().any(|x| x.kind == "implausible_table"));
    let before = img.data_bytes();
    let again = identify_inline_data(&mut img, &mut listing, &builtin_helpers());
    assert!(again.target_sets.is_empty());
    assert_eq!(img.data_bytes(), before);
}
