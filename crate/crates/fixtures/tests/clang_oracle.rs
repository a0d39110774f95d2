//! The bytes in `data/oracle.hex` were produced by clang's integrated
//! assembler (`--target=thumbv7m-none-eabi`) from the same source, with
//! `.w` dropped on encodings that only exist wide.

use thumbscope_fixtures::assemble;

#[test]
fn encodings_match_reference_assembler() {
    let src = include_str!("data/oracle.s");
    let expected = include_str!("data/oracle.hex").trim();
    let prog = assemble(0, src).expect("assembles");
    let got: String = prog.bytes.iter().map(|b| format!("{b:02x}")).collect();
    if got != expected {
        for line in &prog.listing {
            let a = line.address as usize * 2;
            let w = line.width as usize * 2;
            let (g, e) = (&got[a..a + w], expected.get(a..a + w).unwrap_or(""));
            if g != e {
                panic!("0x{:x} `{}`: got {g}, reference {e}", line.address, line.text);
            }
        }
        panic!("length mismatch");
    }
}
