use thumbscope::isa::sweep;
use thumbscope_fixtures::assemble;

#[test]
fn decoder_reproduces_assembler_listing() {
    let src = include_str!("../../fixtures/tests/data/oracle.s");
    let prog = assemble(0x8000, src).unwrap();
    let decoded = sweep(&prog.bytes, prog.base);
    assert_eq!(decoded.len(), prog.listing.len());
    for (insn, line) in decoded.iter().zip(&prog.listing) {
        assert_eq!(insn.address, line.address);
        assert_eq!(insn.width, line.width, "{}", line.text);
        assert_eq!(insn.to_string(), line.text, "at 0x{:x}", line.address);
    }
}
