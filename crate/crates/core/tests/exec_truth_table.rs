//! Runs the executor truth table in `support/exec_table.rs`.

#[path = "support/exec_table.rs"]
mod exec_table;

use exec_table::{run_case, run_table};

#[test]
fn truth_table() {
    let run = run_table();
    for f in &run.failures {
        eprintln!("FAIL {f}");
    }
    assert!(run.failures.is_empty(), "{} of {} cases failed", run.failures.len(), run.cases);
    assert!(run.thin.is_empty(), "mnemonics with fewer than three cases: {:?}", run.thin);
}
#[test]
fn specimen_cases() {
    // Known, unknown and division inputs, checked in isolation.
    assert!(run_case("movs r0, #34", "", "r0=34 nzcv=00??").error.is_none());
    assert!(run_case("adds r2, #0x31", "", "nzcv=????").error.is_none());
    assert!(run_case("udiv r0, r1, r2", "r1=100 r2=7", "r0=14").error.is_none());
}
