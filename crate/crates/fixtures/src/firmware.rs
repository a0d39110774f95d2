//! Synthetic firmware images with known ground truth.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use crate::asm::{assemble, ByteKind, Program};

pub const STACK_TOP: u32 = 0x2000_8000;

/// An assembled image together with the source that produced it.
#[derive(Debug, Clone)]
pub struct Fixture {
    pub name: String,
    pub program: Program,
}

impl Fixture {
    pub fn bytes(&self) -> &[u8] {
        &self.program.bytes
    }

    pub fn base(&self) -> u32 {
        self.program.base
    }

    pub fn label(&self, name: &str) -> u32 {
        self.program.label(name)
    }

    /// Addresses of every `.fn` label.
    pub fn function_starts(&self) -> BTreeSet<u32> {
        self.program.functions.iter().map(|(_, a)| *a).collect()
    }

    pub fn function(&self, name: &str) -> u32 {
        self.program
            .functions
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, a)| *a)
            .unwrap_or_else(|| panic!("{}: no function {name}", self.name))
    }

    /// Addresses of every byte emitted by a data directive.
    pub fn data_bytes(&self) -> BTreeSet<u32> {
        let base = self.program.base;
        self.program
            .kinds
            .iter()
            .enumerate()
            .filter(|(_, k)| **k == ByteKind::Data)
            .map(|(i, _)| base + i as u32)
            .collect()
    }
}

pub fn build(name: &str, base: u32, src: &str) -> Fixture {
    let program = assemble(base, src).unwrap_or_else(|e| panic!("fixture {name}: {e}"));
    Fixture { name: name.to_string(), program }
}

/// A sixteen-entry vector table. Unused core slots point at `default_handler`.
pub fn vector_table(reset: &str, extra_irqs: &[&str]) -> String {
    let mut s = String::from("vectors:\n");
    let _ = writeln!(s, "    .word 0x{STACK_TOP:x}");
    let _ = writeln!(s, "    .word {reset} + 1");
    let _ = writeln!(s, "    .word nmi_handler + 1");
    let _ = writeln!(s, "    .word hardfault_handler + 1");
    for _ in 0..3 {
        s.push_str("    .word default_handler + 1\n");
    }
    s.push_str("    .word 0, 0, 0, 0\n");
    s.push_str("    .word default_handler + 1\n");
    s.push_str("    .word default_handler + 1\n");
    s.push_str("    .word 0\n");
    s.push_str("    .word default_handler + 1\n");
    s.push_str("    .word default_handler + 1\n");
    for irq in extra_irqs {
        let _ = writeln!(s, "    .word {irq} + 1");
    }
    s
}

/// Handlers referenced by [`vector_table`].
pub const CORE_HANDLERS: &str = "
.fn
nmi_handler:
    b nmi_handler
.fn
hardfault_handler:
    b hardfault_handler
.fn
default_handler:
    b default_handler
";

/// Minimal image used for code base recovery.
pub fn code_base_fixture(base: u32) -> Fixture {
    let src = format!(
        "{vt}
.fn
reset_handler:
    bl main
    b reset_handler
.fn
main:
    push {{r4, lr}}
    movs r0, #1
    bl increment
    movs r4, r0
    bl increment
    adds r0, r0, r4
    pop {{r4, pc}}
.fn
increment:
    adds r0, r0, #1
    bx lr
{handlers}
.fn
systick_handler:
    bx lr
",
        vt = vector_table("reset_handler", &["systick_handler"]),
        handlers = CORE_HANDLERS
    );
    build(&format!("code_base_{base:x}"), base, &src)
}

/// Reset handler copying `.data` initialisers that start at `text_end`.
pub fn reset_segment_fixture() -> Fixture {
    let src = format!(
        "{vt}
.fn
reset_handler:
    ldr r1, .Lp_etext
    ldr r2, .Lp_sdata
    ldr r3, .Lp_edata
.Lcopy:
    cmp r2, r3
    bhs .Ldone
    ldr r0, [r1, #0]
    str r0, [r2, #0]
    adds r1, #4
    adds r2, #4
    b .Lcopy
.Ldone:
    bl main
    b .Ldone
    .nopalign 4
.Lp_etext: .word text_end
.Lp_sdata: .word 0x20000000
.Lp_edata: .word 0x20000040
.fn
main:
    movs r0, #0
    bx lr
{handlers}
    .org 0x21000
text_end:
    .hword 0x4a3d, 0xf7ff, 0xfffe, 0x4770, 0xb510, 0x2001, 0xbd10, 0xe7fe
    .word 0x12345678, 0x9abcdef0, 0x0badf00d, 0x20001234
    .word 0, 0, 0, 0
    .hword 0xdf60, 0x4a01, 0x6810, 0x4770
    .word 0x00021001, 0xffffffff, 0x00000000, 0x11111111
",
        vt = vector_table("reset_handler", &[]),
        handlers = CORE_HANDLERS
    );
    build("reset_segment", 0x20000, &src)
}

/// PC-relative loads of word, halfword and byte literals, including a
/// halfword literal whose value reads as the first half of a 32-bit
/// instruction.
pub fn pc_relative_fixture() -> Fixture {
    let src = format!(
        "{vt}
.fn
reset_handler:
    bl load_word
    bl load_half
    bl load_byte
    bl load_word_again
    b reset_handler
.fn
load_word:
    ldr r0, .Lword
    bx lr
    .nopalign 4
.Lword:
    .word 0x4a3df7ff
.fn
load_half:
    ldrh.w r1, .Lhalf
    bx lr
.Lhalf:
    .hword 0xf000
.fn
after_half:
    movs r0, #1
    bx lr
.fn
load_byte:
    ldrb.w r2, .Lbyte
    bx lr
.Lbyte:
    .byte 0x42
    .balign 2
.fn
load_word_again:
    ldr r3, .Lword2
    ldr r0, .Lword2
    adds r0, r0, r3
    bx lr
    .nopalign 4
.Lword2:
    .word 0x0000bd10
{handlers}
",
        vt = vector_table("reset_handler", &[]),
        handlers = CORE_HANDLERS
    );
    build("pc_relative", 0x8000, &src)
}

fn byte_table(table: &str, labels: &[String]) -> String {
    let entries: Vec<String> = labels.iter().map(|l| format!("({l} - {table}) / 2")).collect();
    entries.join(", ")
}

/// `tbb` (five cases, placed as in a published listing) and `tbh` (six cases).
pub fn table_branch_fixture() -> Fixture {
    let tbb_cases: Vec<String> = (0..5).map(|i| format!(".Lb{i}")).collect();
    let tbh_cases: Vec<String> = (0..6).map(|i| format!(".Lh{i}")).collect();
    let mut src = vector_table("reset_handler", &[]);
    src.push_str(
        "
.fn
reset_handler:
    movs r0, #2
    bl switch_byte
    movs r1, #3
    bl switch_half
    b reset_handler
    .org 0x28948
.fn
switch_byte:
    nop
    cmp r0, #4
    bhi .Lbdef
    tbb [pc, r0]
.Lbtab:
",
    );
    let _ = writeln!(src, "    .byte {}", byte_table(".Lbtab", &tbb_cases));
    src.push_str("    .byte 0\n");
    for (i, l) in tbb_cases.iter().enumerate() {
        let _ = writeln!(src, "{l}:\n    movs r0, #{}\n    bx lr", 10 + i);
    }
    src.push_str(
        ".Lbdef:
    movs r0, #0
    bx lr
.fn
switch_half:
    cmp r1, #5
    bhi.w .Lhdef
    tbh [pc, r1, lsl #1]
.Lhtab:
",
    );
    let entries: Vec<String> = tbh_cases.iter().map(|l| format!("({l} - .Lhtab) / 2")).collect();
    let _ = writeln!(src, "    .hword {}", entries.join(", "));
    for (i, l) in tbh_cases.iter().enumerate() {
        let _ = writeln!(src, "{l}:\n    movs r0, #{}\n    bx lr", 20 + i);
    }
    src.push_str(".Lhdef:\n    movs r0, #0\n    bx lr\n");
    src.push_str(CORE_HANDLERS);
    build("table_branch", 0x28000, &src)
}

/// GNU compact switch helpers from libgcc's Thumb-1 support code.
pub const GNU_CASE_UQI: &str = "
.fn
__gnu_thumb1_case_uqi:
    push {r1}
    mov r1, lr
    lsrs r1, r1, #1
    lsls r1, r1, #1
    ldrb r1, [r1, r0]
    lsls r1, r1, #1
    add lr, r1
    pop {r1}
    bx lr
";

pub const GNU_CASE_UHI: &str = "
.fn
__gnu_thumb1_case_uhi:
    push {r0, r1}
    mov r1, lr
    lsrs r1, r1, #1
    lsls r0, r0, #1
    lsls r1, r1, #1
    ldrh r1, [r1, r0]
    lsls r1, r1, #1
    add lr, r1
    pop {r0, r1}
    bx lr
";

/// Keil-style byte switch helper: index in r3; the inline table holds a
/// case count, then count + 1 halfword-scaled offsets (the last is the
/// default).
pub const KEIL_SWITCH8: &str = "
.fn
__ARM_common_switch8:
    push {r4, r5}
    mov r4, lr
    subs r4, r4, #1
    ldrb r5, [r4, #0]
    adds r4, r4, #1
    cmp r3, r5
    bhs .Lsw8_default
    ldrb r3, [r4, r3]
    lsls r3, r3, #1
.Lsw8_join:
    adds r3, r4, r3
    pop {r4, r5}
    bx r3
.Lsw8_default:
    ldrb r3, [r4, r5]
    lsls r3, r3, #1
    b .Lsw8_join
";

/// Calls through `__gnu_thumb1_case_uqi` (four cases) and
/// `__gnu_thumb1_case_uhi` (three cases).
pub fn gnu_helper_fixture() -> Fixture {
    let mut src = vector_table("reset_handler", &[]);
    src.push_str(
        "
.fn
reset_handler:
    movs r0, #1
    bl dispatch_uqi
    movs r0, #2
    bl dispatch_uhi
    b reset_handler
.fn
dispatch_uqi:
    push {r4, lr}
    cmp r0, #3
    bhi .Lqdef
    bl __gnu_thumb1_case_uqi
.Lqtab:
",
    );
    let q: Vec<String> = (0..4).map(|i| format!(".Lq{i}")).collect();
    let _ = writeln!(src, "    .byte {}", byte_table(".Lqtab", &q));
    for (i, l) in q.iter().enumerate() {
        let _ = writeln!(src, "{l}:\n    movs r0, #{}\n    b .Lqout", 30 + i);
    }
    src.push_str(
        ".Lqdef:
    movs r0, #0
.Lqout:
    pop {r4, pc}
.fn
dispatch_uhi:
    push {r4, lr}
    cmp r0, #2
    bhi .Lhdef
    bl __gnu_thumb1_case_uhi
.Lhtab:
",
    );
    let h: Vec<String> = (0..3).map(|i| format!(".Lh{i}")).collect();
    let entries: Vec<String> = h.iter().map(|l| format!("({l} - .Lhtab) / 2")).collect();
    let _ = writeln!(src, "    .hword {}", entries.join(", "));
    for (i, l) in h.iter().enumerate() {
        let _ = writeln!(src, "{l}:\n    movs r0, #{}\n    b .Lhout", 40 + i);
    }
    src.push_str(".Lhdef:\n    movs r0, #0\n.Lhout:\n    pop {r4, pc}\n");
    src.push_str(GNU_CASE_UQI);
    src.push_str(GNU_CASE_UHI);
    src.push_str(CORE_HANDLERS);
    build("gnu_helpers", 0x4000, &src)
}

/// Three-case switch through `__ARM_common_switch8`.
pub fn keil_helper_fixture() -> Fixture {
    let mut src = vector_table("reset_handler", &[]);
    src.push_str(
        "
.fn
reset_handler:
    movs r0, #1
    bl dispatch_switch8
    b reset_handler
.fn
dispatch_switch8:
    push {r4, lr}
    movs r3, r0
    bl __ARM_common_switch8
.Lktab:
",
    );
    let cases: Vec<String> = (0..3).map(|i| format!(".Lk{i}")).chain([".Lkdef".to_string()]).collect();
    let _ = writeln!(src, "    .byte 3, {}", byte_table(".Lktab", &cases));
    src.push_str("    .byte 0\n");
    for (i, l) in cases.iter().enumerate() {
        let v = if i == 3 { 0 } else { 50 + i };
        let _ = writeln!(src, "{l}:\n    movs r0, #{v}\n    pop {{r4, pc}}");
    }
    src.push_str(KEIL_SWITCH8);
    src.push_str(CORE_HANDLERS);
    build("keil_switch8", 0x4000, &src)
}

/// Computed writes to pc: a 24-way `mov pc` dispatch laid out as in a
/// published listing, and an 8-way `ldr pc` dispatch.
pub fn pc_write_fixture() -> Fixture {
    let mut src = vector_table("reset_handler", &[]);
    src.push_str(
        "
.fn
reset_handler:
    movs r0, #5
    bl dispatch24
    movs r0, #3
    bl dispatch8
    b reset_handler
    .org 0x1a838
.fn
dispatch24:
    push {r4, lr}
    nop
    cmp r0, #23
    bhi .Ldef24
    adr r2, .Ltab24
    lsls r3, r0, #2
    ldr r3, [r2, r3]
    mov pc, r3
.Ltab24:
",
    );
    for i in 0..24 {
        let _ = writeln!(src, "    .word .Lc24_{i} + 1");
    }
    for i in 0..24 {
        let _ = writeln!(src, ".Lc24_{i}:\n    movs r0, #{i}\n    pop {{r4, pc}}");
    }
    src.push_str(
        ".Ldef24:
    movs r0, #255
    pop {r4, pc}
.fn
dispatch8:
    cmp r0, #7
    bhi .Ldef8
    adr r1, .Ltab8
    ldr.w pc, [r1, r0, lsl #2]
    .nopalign 4
.Ltab8:
",
    );
    for i in 0..8 {
        let _ = writeln!(src, "    .word .Lc8_{i} + 1");
    }
    for i in 0..8 {
        let _ = writeln!(src, ".Lc8_{i}:\n    adds r0, #{}\n    bx lr", i + 1);
    }
    src.push_str(".Ldef8:\n    movs r0, #0\n    bx lr\n");
    src.push_str(CORE_HANDLERS);
    build("pc_write", 0x1a000, &src)
}

/// About twenty functions exercising the boundary rules, including the
/// two-exit shape of a published walk-through at 0x182b0.
pub fn function_corpus_fixture() -> Fixture {
    let mut src = vector_table("reset_handler", &["uart_irq", "timer_irq"]);
    src.push_str(
        "
.fn
reset_handler:
    bl main
    b reset_handler
.fn
main:
    push {r4, r5, r6, lr}
    movs r0, #3
    movs r1, #4
    bl functionB
    ldr r3, .Lfnc
    blx r3
    movs r0, #2
    bl dispatch_ops
    movs r0, #7
    bl clamp
    bl sum_table
    movs r0, #1
    bl classify
    bl tail_caller
    b branch_only
    .nopalign 4
.Lfnc:
    .word functionC + 1
.fn
clamp:
    cmp r0, #0
    bge .Lclamp_pos
    movs r0, #0
    bx lr
.Lclamp_pos:
    cmp r0, #100
    ble .Lclamp_done
    movs r0, #100
.Lclamp_done:
    bx lr
.fn
strlen_like:
    movs r1, r0
.Lsl_loop:
    ldrb r2, [r1, #0]
    adds r1, #1
    cmp r2, #0
    bne .Lsl_loop
    subs r0, r1, r0
    subs r0, #1
    bx lr
.fn
sum_table:
    push {r4, lr}
    ldr r1, .Lsum_tab
    movs r0, #0
    movs r2, #0
    b .Lsum_test
    .nopalign 4
.Lsum_tab:
    .word 0x20000100
.Lsum_loop:
    ldr r3, [r1, #0]
    adds r0, r0, r3
    adds r1, #4
    adds r2, #1
.Lsum_test:
    cmp r2, #4
    blt .Lsum_loop
    bl strlen_like
    pop {r4, pc}
.fn
classify:
    cmp r0, #0
    it eq
    bxeq lr
    cmp r0, #1
    itt eq
    moveq r0, #10
    bxeq lr
    movs r0, #20
    bx lr
.fn
tail_caller:
    adds r0, #1
    b.w clamp
.fn
branch_only:
    push {r4, lr}
    bl error_a
    pop {r4, pc}
.fn
error_a:
    movs r0, #1
    b error_b
.fn
error_b:
    push {r4, lr}
    b error_a
.fn
uart_irq:
    push {r4, lr}
    bl strlen_like
    pop {r4, pc}
.fn
timer_irq:
    bx lr
.fn
op_inc:
    adds r0, #1
    bx lr
.fn
op_dec:
    subs r0, #1
    bx lr
.fn
op_neg:
    rsbs r0, r0, #0
    bx lr
.fn
dispatch_ops:
    cmp r0, #2
    bhi .Lops_done
    adr r1, .Lops
    lsls r0, r0, #2
    ldr r2, [r1, r0]
    movs r0, #9
    mov pc, r2
.Lops_done:
    bx lr
.Lops:
    .word op_inc + 1, op_dec + 1, op_neg + 1
    .org 0x182b0
.fn
functionB:
    push {r4, lr}
    cmp r0, #0
    bne .LB_nonzero
    movs r0, #1
    adds r0, r0, r1
    movs r1, #2
    muls r0, r1, r0
    pop {r4, pc}
.LB_nonzero:
    movs r4, r0
    adds r4, r4, r1
    lsls r4, r4, #1
    movs r0, r4
    bl clamp
    adds r0, r0, r4
    subs r0, #3
    pop {r4, pc}
    nop
.fn
functionC:
    movs r0, #42
    bx lr
",
    );
    src.push_str(CORE_HANDLERS);
    build("function_corpus", 0x10000, &src)
}

/// The fixed-passkey configuration call of a published example, at its
/// original addresses (code base 0x1b000).
pub fn passkey_fixture(passkey: &str) -> Fixture {
    assert_eq!(passkey.len(), 6);
    let key_bytes: Vec<String> = passkey.bytes().map(|b| format!("0x{b:02x}")).collect();
    let mut src = vector_table("reset_handler", &[]);
    src.push_str(
        "
.fn
reset_handler:
    bl main
    b reset_handler
.fn
main:
    push {r4, lr}
    bl ble_stack_init
    bl set_fixed_passkey
.Lidle:
    wfe
    b .Lidle
.fn
ble_stack_init:
    movs r0, #0
    bx lr
    .org 0x1e748
.fn
sd_ble_opt_set:
    svc #0x67
    bx lr
    .org 0x1eab4
.fn
set_fixed_passkey:
    push {lr}
    sub sp, #44
    nop
    ldr r2, .Lpasskey_ptr
    add r3, sp, #24
    ldr r1, [r2, #0]
    movs r0, #34
    str r1, [sp, #24]
    ldrh r1, [r2, #4]
    strh r1, [r3, #4]
    ldrb r2, [r2, #6]
    add r1, sp, #32
    strb r2, [r3, #6]
    str r3, [sp, #32]
    bl sd_ble_opt_set
    add sp, #44
    pop {pc}
    .org 0x1ed9c
.Lpasskey_ptr:
    .word passkey
",
    );
    src.push_str(CORE_HANDLERS);
    let _ = write!(
        src,
        "    .org 0x21f0c
    .hword 0x2528, 0x2000, 0x0001, 0x0700
passkey:
    .byte {}
    .byte 0, 0
",
        key_bytes.join(", ")
    );
    build(&format!("passkey_{passkey}"), 0x1b000, &src)
}

/// Call-graph shapes for the tracing rules: an off-path leaf before the
/// call of interest, a perpetual-loop callee, and a data-dependent branch.
pub fn trace_rules_fixture() -> Fixture {
    let mut src = vector_table("reset_handler", &[]);
    src.push_str(
        "
.fn
reset_handler:
    bl main
    b reset_handler
.fn
main:
    push {r4, lr}
    bl report_leaf
    bl report_branch
    pop {r4, pc}
.fn
report_leaf:
    push {r4, lr}
    bl spin_forever_if_bad
    movs r0, #9
    bl compute_seven
    movs r1, #1
    bl sd_ble_gap_addr_set
    pop {r4, pc}
.fn
compute_seven:
    movs r0, #7
    bx lr
.fn
spin_forever_if_bad:
    b spin_forever_if_bad
.fn
report_branch:
    push {r4, lr}
    ldr r2, .Lflag
    ldr r2, [r2, #0]
    cmp r2, #0
    beq .Lrb_two
    movs r1, #1
    b .Lrb_call
.Lrb_two:
    movs r1, #2
.Lrb_call:
    movs r0, #5
    bl sd_ble_gap_addr_set
    pop {r4, pc}
    .nopalign 4
.Lflag:
    .word 0x20000010
.fn
sd_ble_gap_addr_set:
    svc #0x6c
    bx lr
",
    );
    src.push_str(CORE_HANDLERS);
    build("trace_rules", 0x3c000, &src)
}

/// Adds a service, then a characteristic whose service handle argument is
/// read back from where the first call stored its output.
pub fn chaining_fixture() -> Fixture {
    let mut src = vector_table("reset_handler", &[]);
    src.push_str(
        "
.fn
reset_handler:
    bl main
    b reset_handler
.fn
main:
    push {r4, lr}
    bl services_init
    pop {r4, pc}
.fn
services_init:
    push {r4, lr}
    sub sp, #16
    ldr r4, .Lhandle_ptr
    movs r0, #1
    mov r1, sp
    movs r2, #0x0d
    strh r2, [r1, #0]
    movs r2, r4
    bl sd_ble_gatts_service_add
    ldrh r0, [r4, #0]
    add r1, sp, #8
    movs r2, #0x2a
    strh r2, [r1, #0]
    bl sd_ble_gatts_characteristic_add
    add sp, #16
    pop {r4, pc}
    .nopalign 4
.Lhandle_ptr:
    .word 0x20000200
.fn
sd_ble_gatts_service_add:
    svc #0xa8
    bx lr
.fn
sd_ble_gatts_characteristic_add:
    svc #0xaa
    bx lr
",
    );
    src.push_str(CORE_HANDLERS);
    build("chaining", 0x26000, &src)
}

/// Link bases used for code base recovery.
pub const CODE_BASES: [u32; 5] = [0, 0x1b000, 0x1005_1000, 0x26000, 0x3c000];

/// The hand-written fixture corpus.
pub fn corpus() -> Vec<Fixture> {
    let mut v: Vec<Fixture> = CODE_BASES.iter().map(|&b| code_base_fixture(b)).collect();
    v.push(reset_segment_fixture());
    v.push(pc_relative_fixture());
    v.push(table_branch_fixture());
    v.push(gnu_helper_fixture());
    v.push(keil_helper_fixture());
    v.push(pc_write_fixture());
    v.push(function_corpus_fixture());
    v.push(passkey_fixture("123456"));
    v.push(passkey_fixture("000000"));
    v.push(trace_rules_fixture());
    v.push(chaining_fixture());
    v
}
