use thumbscope_fixtures::firmware::{self, corpus};

#[test]
fn every_fixture_assembles() {
    for f in corpus() {
        assert!(f.bytes().len() >= 64, "{}", f.name);
        assert!(!f.function_starts().is_empty(), "{}", f.name);
    }
}

#[test]
fn published_addresses_are_reproduced() {
    let p = firmware::passkey_fixture("123456");
    assert_eq!(p.function("sd_ble_opt_set"), 0x1e748);
    let l = p.program.listing.iter().find(|l| l.address == 0x1eaba).unwrap();
    assert_eq!(l.text, "ldr r2, [pc, #736]");
    let bl = p.program.listing.iter().find(|l| l.address == 0x1ead0).unwrap();
    assert_eq!(bl.text, "bl 0x1e748");
    assert_eq!(&p.bytes()[0x21f14 - 0x1b000..][..6], b"123456");

    let t = firmware::table_branch_fixture();
    let tbb = t.program.listing.iter().find(|l| l.text.starts_with("tbb")).unwrap();
    assert_eq!(tbb.address, 0x2894e);
    assert!(t.program.listing.iter().any(|l| l.address == 0x2894a && l.text == "cmp r0, #4"));

    let w = firmware::pc_write_fixture();
    let at = |a: u32| w.program.listing.iter().find(|l| l.address == a).unwrap().text.clone();
    assert_eq!(at(0x1a83c), "cmp r0, #23");
    assert!(at(0x1a83e).starts_with("bhi"));
    assert_eq!(at(0x1a844), "ldr r3, [r2, r3]");
    assert_eq!(at(0x1a846), "mov pc, r3");

    let f = firmware::function_corpus_fixture();
    assert_eq!(f.function("functionB"), 0x182b0);
    assert_eq!(f.function("functionC"), 0x182d4);
    let at = |a: u32| f.program.listing.iter().find(|l| l.address == a).unwrap().text.clone();
    assert!(at(0x182b4).starts_with("bne"));
    assert_eq!(at(0x182be), "pop {r4, pc}");
    assert_eq!(at(0x182d0), "pop {r4, pc}");
    assert_eq!(at(0x182d2), "nop");
}
