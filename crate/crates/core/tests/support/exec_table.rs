//! Truth table for the micro-executor.
//!
//! Each case is a short program assembled at 0x1000. Execution starts at the
//! `start` label when present, otherwise at the first instruction, and runs
//! `steps=N` instructions (default 1). Expected values are worked out by hand.
//!
//! Initial state: `rN=v`, `sp=v`, `lr=v`, `nzcv=bits` (`?` per unknown flag),
//! `[addr]=hexbytes` (`??` for an unknown byte). Unlisted registers and flags
//! start unknown, except sp which starts at the top of the stack region.
//!
//! Expectations use the same syntax plus `flow=...`. Registers, flags and
//! memory that are not mentioned must come out unchanged, so every case also
//! checks that nothing else was touched. Values may be `?` (unknown) or
//! `@label`.

use std::collections::BTreeMap;

use thumbscope::exec::{step, Env, Flags, Flow, MachineState};
use thumbscope::image::FirmwareImage;
use thumbscope::isa::{sweep, Instruction};
use thumbscope_fixtures::{assemble, Program};

const BASE: u32 = 0x1000;

/// (program, initial state, expected state)
pub const CASES: &[(&str, &str, &str)] = &[
    // lsl
    ("lsls r0, r1, #4", "r1=0x18000001 nzcv=0000", "r0=0x80000010 nzcv=1010"),
    ("lsls r0, r1, #1", "r1=0x80000000 nzcv=0001", "r0=0 nzcv=0111"),
    ("lsls r0, r1", "r0=1 r1=33 nzcv=0010", "r0=0 nzcv=0100"),
    ("lsl.w r0, r1, r2", "r1=0xff r2=8", "r0=0xff00"),
    ("lsls r2, r3, #3", "nzcv=0000", "r2=? nzcv=???0"),
    // lsr
    ("lsrs r0, r1, #1", "r1=3 nzcv=0000", "r0=1 nzcv=0010"),
    ("lsrs r0, r1", "r0=0x80000000 r1=32 nzcv=0000", "r0=0 nzcv=0110"),
    ("lsr.w r0, r1, #28", "r1=0xf0000000 nzcv=0000", "r0=0xf"),
    ("lsrs r0, r1", "r0=0x1234 r1=0x100 nzcv=0010", "nzcv=0010"),
    // asr
    ("asrs r0, r1, #4", "r1=0x80000010 nzcv=0000", "r0=0xf8000001 nzcv=1000"),
    ("asrs r0, r1, #1", "r1=3 nzcv=0000", "r0=1 nzcv=0010"),
    ("asrs r0, r1", "r0=0x80000000 r1=40 nzcv=0000", "r0=0xffffffff nzcv=1010"),
    ("asr.w r0, r1, #31", "r1=0x7fffffff", "r0=0"),
    // ror
    ("rors r0, r1", "r0=0xf1 r1=4 nzcv=0000", "r0=0x1000000f nzcv=0000"),
    ("rors r0, r1", "r0=1 r1=1 nzcv=0000", "r0=0x80000000 nzcv=1010"),
    ("ror.w r0, r1, #8", "r1=0x12345678", "r0=0x78123456"),
    ("rors r0, r1", "r0=0x12345678 r1=32 nzcv=0010", "nzcv=0000"),
    // mov
    ("movs r0, #34", "r0=1 nzcv=1010", "r0=34 nzcv=0010"),
    ("movs r0, #0", "r0=1 nzcv=1000", "r0=0 nzcv=0100"),
    ("mov r8, r1", "r1=0xdeadbeef nzcv=1111", "r8=0xdeadbeef"),
    ("mov r0, r2", "r0=5", "r0=?"),
    ("it eq; moveq r0, #1", "r0=7 nzcv=0100 steps=2", "r0=1"),
    ("it eq; moveq r0, #1", "r0=7 nzcv=0000 steps=2", ""),
    ("it eq; moveq r0, #1", "r0=7 nzcv=???? steps=2", "flow=indet"),
    // mvn
    ("mvns r0, r1", "r1=0 nzcv=0000", "r0=0xffffffff nzcv=1000"),
    ("mvns r0, r1", "r1=0xffffffff nzcv=0011", "r0=0 nzcv=0111"),
    ("mvn.w r0, #0xff", "", "r0=0xffffff00"),
    // add
    ("adds r0, r1, r2", "r1=0x7fffffff r2=1 nzcv=0000", "r0=0x80000000 nzcv=1001"),
    ("adds r0, r1, r2", "r1=0xffffffff r2=1 nzcv=0000", "r0=0 nzcv=0110"),
    ("adds r2, #0x31", "nzcv=0000", "nzcv=????"),
    ("add r0, sp, #8", "nzcv=0101", "r0=0x30000008"),
    ("add.w r0, r1, r2, lsl #2", "r1=0x100 r2=3", "r0=0x10c"),
    // adc
    ("adcs r0, r1", "r0=1 r1=2 nzcv=0010", "r0=4 nzcv=0000"),
    ("adcs r0, r1", "r0=0xffffffff r1=0 nzcv=0010", "r0=0 nzcv=0110"),
    ("adcs r0, r1", "r0=1 r1=1", "r0=?"),
    ("adc.w r0, r1, #1", "r1=5 nzcv=0010", "r0=7"),
    // sub
    ("subs r0, r1, #1", "r1=0 nzcv=0000", "r0=0xffffffff nzcv=1000"),
    ("subs r0, r1, r2", "r1=5 r2=5 nzcv=0000", "r0=0 nzcv=0110"),
    ("subs r0, r1, r2", "r1=0x80000000 r2=1 nzcv=0000", "r0=0x7fffffff nzcv=0011"),
    ("sub sp, #16", "", "sp=0x2ffffff0"),
    ("sub.w r0, r1, #256", "r1=0x1000", "r0=0xf00"),
    // sbc
    ("sbcs r0, r1", "r0=5 r1=3 nzcv=0010", "r0=2 nzcv=0010"),
    ("sbcs r0, r1", "r0=5 r1=3 nzcv=0000", "r0=1 nzcv=0010"),
    ("sbcs r0, r1", "r0=0 r1=0 nzcv=0000", "r0=0xffffffff nzcv=1000"),
    ("sbc.w r0, r1, r2", "r1=10 r2=1 nzcv=0010", "r0=9"),
    // rsb
    ("rsbs r0, r1, #0", "r1=1 nzcv=0000", "r0=0xffffffff nzcv=1000"),
    ("rsbs r0, r1, #0", "r1=0 nzcv=0000", "r0=0 nzcv=0110"),
    ("rsbs r0, r1, #0", "r1=0x80000000 nzcv=0000", "r0=0x80000000 nzcv=1001"),
    ("rsb.w r0, r1, #100", "r1=30", "r0=70"),
    // cmp
    ("cmp r0, #4", "r0=4", "nzcv=0110"),
    ("cmp r0, #4", "r0=3", "nzcv=1000"),
    ("cmp r0, r1", "r0=0x80000000 r1=1", "nzcv=0011"),
    ("cmp r0, #1", "nzcv=0000", "nzcv=????"),
    ("cmp r8, r9", "r8=10 r9=2", "nzcv=0010"),
    // cmn
    ("cmn r0, r1", "r0=1 r1=0xffffffff", "nzcv=0110"),
    ("cmn r0, r1", "r0=0x7fffffff r1=1", "nzcv=1001"),
    ("cmn r0, r1", "r0=1 r1=2 nzcv=1111", "nzcv=0000"),
    ("cmn.w r0, #1", "r0=0xfffffffe", "nzcv=1000"),
    // tst
    ("tst r0, r1", "r0=0xf0 r1=0x0f nzcv=0011", "nzcv=0111"),
    ("tst r0, r1", "r0=0x80000000 r1=0x80000001 nzcv=0000", "nzcv=1000"),
    ("tst.w r0, #0x80000000", "r0=0x80000000 nzcv=0000", "nzcv=1010"),
    ("tst r0, r1", "r1=1 nzcv=0001", "nzcv=???1"),
    // teq
    ("teq r0, r1", "r0=5 r1=5 nzcv=0000", "nzcv=0100"),
    ("teq r0, #1", "r0=0x80000000 nzcv=0000", "nzcv=1000"),
    ("teq r0, r1", "r0=3 r1=1 nzcv=0010", "nzcv=0010"),
    // and
    ("ands r0, r1", "r0=0xff00ff00 r1=0x0ff00ff0 nzcv=0000", "r0=0x0f000f00 nzcv=0000"),
    ("ands r0, r1", "r0=0xf0 r1=0x0f nzcv=1011", "r0=0 nzcv=0111"),
    ("and.w r0, r1, #0xff", "r1=0x1234", "r0=0x34"),
    ("ands r0, r1", "r0=0x80000000 nzcv=0001", "r0=? nzcv=???1"),
    // orr
    ("orrs r0, r1", "r0=0xf0 r1=0x0f nzcv=0000", "r0=0xff nzcv=0000"),
    ("orrs r0, r1", "r0=0 r1=0 nzcv=0000", "nzcv=0100"),
    ("orr.w r0, r1, #0x80000000", "r1=1", "r0=0x80000001"),
    ("orrs r0, r1", "r0=0x80000000 r1=0 nzcv=0000", "nzcv=1000"),
    // eor
    ("eors r0, r1", "r0=0xff r1=0x0f nzcv=0000", "r0=0xf0"),
    ("eors r0, r1", "r0=0x55 r1=0x55 nzcv=0000", "r0=0 nzcv=0100"),
    ("eor.w r0, r1, r2", "r1=0xaaaaaaaa r2=0xffffffff", "r0=0x55555555"),
    ("eors r0, r1", "r0=0x7fffffff r1=0xffffffff nzcv=0000", "r0=0x80000000 nzcv=1000"),
    // bic
    ("bics r0, r1", "r0=0xff r1=0x0f nzcv=0000", "r0=0xf0"),
    ("bics r0, r1", "r0=0xff r1=0xff nzcv=0000", "r0=0 nzcv=0100"),
    ("bic.w r0, r1, #0xff", "r1=0x1234", "r0=0x1200"),
    // mul
    ("muls r0, r1, r0", "r0=6 r1=7 nzcv=0011", "r0=42 nzcv=0011"),
    ("muls r0, r1, r0", "r0=0 r1=5 nzcv=0000", "nzcv=0100"),
    ("mul.w r0, r1, r2", "r1=0x10000 r2=0x10000", "r0=0"),
    ("muls r0, r1, r0", "r0=0xffffffff r1=2 nzcv=0000", "r0=0xfffffffe nzcv=1000"),
    // mla
    ("mla r0, r1, r2, r3", "r1=3 r2=4 r3=5", "r0=17"),
    ("mla r0, r1, r2, r3", "r1=0xffffffff r2=2 r3=3", "r0=1"),
    ("mla r0, r1, r2, r3", "r0=9 r1=3 r2=4", "r0=?"),
    // mls
    ("mls r0, r1, r2, r3", "r1=3 r2=4 r3=20", "r0=8"),
    ("mls r0, r1, r2, r3", "r1=1 r2=1 r3=0", "r0=0xffffffff"),
    ("mls r0, r1, r2, r3", "r0=9 r2=4 r3=5", "r0=?"),
    // udiv
    ("udiv r0, r1, r2", "r1=100 r2=7", "r0=14"),
    ("udiv r0, r1, r2", "r1=0xffffffff r2=16", "r0=0x0fffffff"),
    ("udiv r0, r1, r2", "r0=3 r1=5 r2=0", "r0=0"),
    ("udiv r0, r1, r2", "r1=5 r2=9", "r0=0"),
    // sdiv
    ("sdiv r0, r1, r2", "r1=-7 r2=2", "r0=0xfffffffd"),
    ("sdiv r0, r1, r2", "r1=0x80000000 r2=-1", "r0=0x80000000"),
    ("sdiv r0, r1, r2", "r1=9 r2=0", "r0=0"),
    ("sdiv r0, r1, r2", "r1=100 r2=-3", "r0=0xffffffdf"),
    // ldr
    ("ldr r0, [r1]", "r1=0x20000000 [0x20000000]=78563412", "r0=0x12345678"),
    ("ldr.w r0, [r1, #4]!", "r1=0x20000000 [0x20000004]=01000000", "r0=1 r1=0x20000004"),
    ("ldr.w r0, [r1], #4", "r1=0x20000000 [0x20000000]=02000000", "r0=2 r1=0x20000004"),
    ("ldr r0, lit; nop; .balign 4; lit: .word 0xcafef00d", "", "r0=0xcafef00d"),
    ("ldr.w r0, [r1, r2, lsl #2]", "r1=0x20000000 r2=1 [0x20000004]=efbeadde", "r0=0xdeadbeef"),
    ("ldr r0, [r1]", "r0=5 r1=0x20000000", "r0=?"),
    ("ldr r0, [sp, #4]", "sp=0x2ffffff0 [0x2ffffff4]=44332211", "r0=0x11223344"),
    ("ldr.w pc, [r0]", "r0=0x20000000 [0x20000000]=01200000", "flow=ind:0x2000"),
    // ldrb
    ("ldrb r0, [r1]", "r1=0x20000000 [0x20000000]=80", "r0=0x80"),
    ("ldrb r0, [r1, #3]", "r1=0x20000000 [0x20000000]=11223344", "r0=0x44"),
    ("ldrb r0, [r1, r2]", "r1=0x20000000 r2=1 [0x20000000]=1122", "r0=0x22"),
    ("ldrb r0, [r1]", "r0=1 r1=0x20000000 [0x20000000]=??", "r0=?"),
    // ldrh
    ("ldrh r0, [r1]", "r1=0x20000000 [0x20000000]=3412", "r0=0x1234"),
    ("ldrh r0, [r1, #2]", "r1=0x20000000 [0x20000000]=11223344", "r0=0x4433"),
    ("ldrh r0, [r1]", "r0=1 r1=0x20000000 [0x20000000]=ff??", "r0=?"),
    // ldrsb
    ("ldrsb r0, [r1, r2]", "r1=0x20000000 r2=0 [0x20000000]=80", "r0=0xffffff80"),
    ("ldrsb r0, [r1, r2]", "r1=0x20000000 r2=0 [0x20000000]=7f", "r0=0x7f"),
    ("ldrsb.w r0, [r1, #1]", "r1=0x20000000 [0x20000000]=00fe", "r0=0xfffffffe"),
    // ldrsh
    ("ldrsh r0, [r1, r2]", "r1=0x20000000 r2=0 [0x20000000]=0080", "r0=0xffff8000"),
    ("ldrsh r0, [r1, r2]", "r1=0x20000000 r2=0 [0x20000000]=ff7f", "r0=0x7fff"),
    ("ldrsh.w r0, [r1, #2]", "r1=0x20000000 [0x20000000]=0000feff", "r0=0xfffffffe"),
    // str
    ("str r0, [r1]", "r0=0x12345678 r1=0x20000000", "[0x20000000]=78563412"),
    ("str.w r0, [r1, #4]!", "r0=7 r1=0x20000000", "[0x20000004]=07000000 r1=0x20000004"),
    ("str r0, [sp, #8]", "r0=0xa5 sp=0x2fffff00", "[0x2fffff08]=a5000000"),
    ("str r0, [r1]", "r1=0x20000000 [0x20000000]=11223344", "[0x20000000]=????????"),
    ("str r0, [r1]", "r0=1", ""),
    // strb
    ("strb r0, [r1]", "r0=0x1234 r1=0x20000000", "[0x20000000]=34"),
    ("strb r0, [r1, #5]", "r0=0xff r1=0x20000000 [0x20000004]=000000", "[0x20000005]=ff"),
    ("strb r0, [r1, r2]", "r0=0x80 r1=0x20000000 r2=2", "[0x20000002]=80"),
    // strh
    ("strh r0, [r1]", "r0=0x12345678 r1=0x20000000", "[0x20000000]=7856"),
    ("strh r0, [r1, #2]", "r0=0xbeef r1=0x20000000 [0x20000000]=00000000", "[0x20000002]=efbe"),
    ("strh r0, [r1, r2]", "r1=0x20000000 r2=4", "[0x20000004]=????"),
    // ldrd
    ("ldrd r0, r1, [r2]", "r2=0x20000000 [0x20000000]=0100000002000000", "r0=1 r1=2"),
    ("ldrd r0, r1, [r2, #8]", "r2=0x20000000 [0x20000008]=ffffffff00000080", "r0=0xffffffff r1=0x80000000"),
    ("ldrd r0, r1, [r2, #-8]!", "r2=0x20000010 [0x20000008]=03000000????????", "r0=3 r1=? r2=0x20000008"),
    // strd
    ("strd r0, r1, [r2]", "r0=1 r1=2 r2=0x20000000", "[0x20000000]=0100000002000000"),
    ("strd r0, r1, [r2, #-8]!", "r0=3 r1=4 r2=0x20000010", "[0x20000008]=0300000004000000 r2=0x20000008"),
    ("strd r0, r1, [sp, #4]", "r1=5 sp=0x2fffff00", "[0x2fffff04]=????????05000000"),
    // ldm
    ("ldm r0!, {r1, r2}", "r0=0x20000000 [0x20000000]=0100000002000000", "r0=0x20000008 r1=1 r2=2"),
    ("ldm r0, {r0, r1}", "r0=0x20000000 [0x20000000]=0300000004000000", "r0=3 r1=4"),
    ("ldm.w r0, {r1, pc}", "r0=0x20000000 [0x20000000]=0900000041200000", "r1=9 flow=ind:0x2040"),
    // stm
    ("stm r0!, {r1, r2}", "r0=0x20000000 r1=1 r2=2", "r0=0x20000008 [0x20000000]=0100000002000000"),
    ("stm.w r0, {r1, r2}", "r0=0x20000000 r1=0xa r2=0xb", "[0x20000000]=0a0000000b000000"),
    ("stm r0!, {r1}", "r0=0x20000000", "r0=0x20000004 [0x20000000]=????????"),
    // stmdb
    ("stmdb r0!, {r1, r2}", "r0=0x20000010 r1=1 r2=2", "r0=0x20000008 [0x20000008]=0100000002000000"),
    ("stmdb r0, {r1}", "r0=0x20000010 r1=7", "[0x2000000c]=07000000"),
    ("stmdb r1!, {r4, lr}", "r1=0x20000010 r4=4 lr=0x1235", "r1=0x20000008 [0x20000008]=0400000035120000"),
    // push
    ("push {r0, lr}", "r0=1 lr=0x1235", "sp=0x2ffffff8 [0x2ffffff8]=0100000035120000"),
    ("push {r4, r5, r6, r7}", "r4=4 r5=5 r6=6 r7=7", "sp=0x2ffffff0 [0x2ffffff0]=04000000050000000600000007000000"),
    ("push {r0}", "", "sp=0x2ffffffc [0x2ffffffc]=????????"),
    // pop
    ("pop {r0, pc}", "sp=0x2ffffff8 [0x2ffffff8]=0500000035120000", "r0=5 sp=0x30000000 flow=ind:0x1234"),
    ("pop {r4, r5}", "sp=0x2ffffff8 [0x2ffffff8]=0400000005000000", "r4=4 r5=5 sp=0x30000000"),
    ("pop {pc}", "sp=0x2ffffff0 [0x2ffffff0]=????????", "sp=0x2ffffff4 flow=ind:none"),
    // b
    ("b t; nop; t: nop", "", "flow=jump:@t"),
    ("beq t; nop; t: nop", "nzcv=0100", "flow=jump:@t"),
    ("beq t; nop; t: nop", "nzcv=0000", "flow=next"),
    ("beq t; nop; t: nop", "", "flow=indet"),
    ("bgt t; nop; t: nop", "nzcv=0000", "flow=jump:@t"),
    ("bgt t; nop; t: nop", "nzcv=1000", "flow=next"),
    ("b.w t; .space 4000; t: nop", "", "flow=jump:@t"),
    // bl
    ("bl t; nop; t: nop", "", "lr=0x1005 flow=call:@t/0x1004"),
    ("t: nop; start: bl t", "lr=7", "lr=0x1007 flow=call:@t/0x1006"),
    ("nop; start: bl t; nop; t: nop", "nzcv=0100", "lr=0x1007 flow=call:@t/0x1006"),
    // bx
    ("bx lr", "lr=0x1235", "flow=ind:0x1234"),
    ("bx r0", "", "flow=ind:none"),
    ("it eq; bxeq lr", "lr=0x1235 nzcv=0000 steps=2", "flow=next"),
    ("it eq; bxeq lr", "lr=0x1235 nzcv=0100 steps=2", "flow=ind:0x1234"),
    // blx
    ("blx r3", "r3=0x1101", "lr=0x1003 flow=call:0x1100/0x1002"),
    ("blx r3", "", "lr=0x1003 flow=call:none/0x1002"),
    ("nop; start: blx r0", "r0=0x4001 lr=1", "lr=0x1005 flow=call:0x4000/0x1004"),
    // cbz
    ("cbz r0, t; nop; t: nop", "r0=0", "flow=jump:@t"),
    ("cbz r0, t; nop; t: nop", "r0=1", "flow=next"),
    ("cbz r0, t; nop; t: nop", "", "flow=indet"),
    // cbnz
    ("cbnz r0, t; nop; t: nop", "r0=0", "flow=next"),
    ("cbnz r0, t; nop; t: nop", "r0=0x80000000", "flow=jump:@t"),
    ("cbnz r0, t; nop; t: nop", "", "flow=indet"),
    // tbb
    ("tbb [pc, r0]; .byte 2, 3", "r0=1", "flow=ind:0x100a"),
    ("tbb [pc, r0]; .byte 2, 3", "r0=0", "flow=ind:0x1008"),
    ("tbb [pc, r0]; .byte 2, 3", "", "flow=ind:none"),
    ("tbb [r1, r0]", "r0=0 r1=0x20000000 [0x20000000]=05", "flow=ind:0x100e"),
    // tbh
    ("tbh [pc, r0, lsl #1]; .short 2, 4", "r0=1", "flow=ind:0x100c"),
    ("tbh [pc, r0, lsl #1]; .short 2, 4", "r0=0", "flow=ind:0x1008"),
    ("tbh [pc, r0, lsl #1]; .short 2, 4", "r0=0x10000", "flow=ind:none"),
    // svc
    ("svc #0x67", "r0=1", "flow=svc:0x67"),
    ("svc #0", "", "flow=svc:0"),
    ("svc #255", "nzcv=1111", "flow=svc:255"),
    // bkpt
    ("bkpt #0", "", "flow=trap"),
    ("bkpt #0xab", "r0=1", "flow=trap"),
    ("bkpt #1", "nzcv=0000", "flow=trap"),
    // udf
    ("udf #0", "", "flow=trap"),
    ("udf #0xfe", "r0=1", "flow=trap"),
    ("udf #7", "nzcv=0000", "flow=trap"),
    // hints and barriers leave everything alone
    ("nop", "", ""),
    ("nop", "r0=1 nzcv=1010", ""),
    ("nop", "sp=0x2fffff00 [0x2fffff00]=01", ""),
    ("yield", "", ""),
    ("yield", "r0=1 nzcv=1010", ""),
    ("yield", "lr=0x1235", ""),
    ("wfe", "", ""),
    ("wfe", "r0=1 nzcv=1010", ""),
    ("wfe", "lr=0x1235", ""),
    ("wfi", "", ""),
    ("wfi", "r0=1 nzcv=1010", ""),
    ("wfi", "lr=0x1235", ""),
    ("sev", "", ""),
    ("sev", "r0=1 nzcv=1010", ""),
    ("sev", "lr=0x1235", ""),
    ("dsb sy", "", ""),
    ("dsb sy", "r0=1 nzcv=0101", ""),
    ("dsb sy", "[0x20000000]=01", ""),
    ("dmb sy", "", ""),
    ("dmb sy", "r0=1 nzcv=0101", ""),
    ("dmb sy", "[0x20000000]=01", ""),
    ("isb sy", "", ""),
    ("isb sy", "r0=1 nzcv=0101", ""),
    ("isb sy", "[0x20000000]=01", ""),
    ("cpsie i", "", ""),
    ("cpsie i", "r0=1 nzcv=0101", ""),
    ("cpsie f", "", ""),
    ("cpsid i", "", ""),
    ("cpsid i", "r0=1 nzcv=0101", ""),
    ("cpsid f", "", ""),
    ("msr primask, r0", "r0=1", ""),
    ("msr basepri, r1", "r1=0x20", ""),
    ("msr control, r0", "r0=2 nzcv=0110", ""),
    ("mrs r0, primask", "r0=5", "r0=?"),
    ("mrs r1, basepri", "r1=5 nzcv=0110", "r1=?"),
    ("mrs r2, control", "", ""),
    // it executes nothing itself
    ("it eq; moveq r0, #1", "r0=7 nzcv=0000", ""),
    ("ite ne; movne r0, #1; moveq r0, #2", "nzcv=0100", ""),
    ("itt lt; movlt r0, #1; movlt r1, #1", "", ""),
    // adr
    ("adr r0, t; nop; .balign 4; t: .word 0", "", "r0=@t"),
    ("nop; start: adr r0, t; .balign 4; t: .word 0", "r0=1", "r0=@t"),
    ("adr r0, t; .space 32; .balign 4; t: .word 0", "nzcv=0000", "r0=@t"),
    // extends
    ("sxtb r0, r1", "r1=0x80", "r0=0xffffff80"),
    ("sxtb r0, r1", "r1=0x17f", "r0=0x7f"),
    ("sxtb r0, r1", "r0=1", "r0=?"),
    ("sxth r0, r1", "r1=0x8000", "r0=0xffff8000"),
    ("sxth r0, r1", "r1=0x12347fff", "r0=0x7fff"),
    ("sxth r0, r1", "r1=0xffff", "r0=0xffffffff"),
    ("uxtb r0, r1", "r1=0xffffff80", "r0=0x80"),
    ("uxtb r0, r1", "r1=0x1234", "r0=0x34"),
    ("uxtb r0, r1", "r0=1", "r0=?"),
    ("uxth r0, r1", "r1=0xffff8000", "r0=0x8000"),
    ("uxth r0, r1", "r1=0x12345678", "r0=0x5678"),
    ("uxth r0, r1", "r0=1 r1=0", "r0=0"),
    // byte reversal
    ("rev r0, r1", "r1=0x12345678", "r0=0x78563412"),
    ("rev r0, r1", "r1=0xff", "r0=0xff000000"),
    ("rev r0, r1", "r0=1", "r0=?"),
    ("rev16 r0, r1", "r1=0x12345678", "r0=0x34127856"),
    ("rev16 r0, r1", "r1=0x00ff00ff", "r0=0xff00ff00"),
    ("rev16 r0, r1", "r1=0xabcd", "r0=0xcdab"),
    ("revsh r0, r1", "r1=0x1280", "r0=0xffff8012"),
    ("revsh r0, r1", "r1=0x0012", "r0=0x1200"),
    ("revsh r0, r1", "r1=0xffff7f00", "r0=0x7f"),
    // wide immediates
    ("movw r0, #0x1234", "r0=0xffffffff", "r0=0x1234"),
    ("movw r0, #0xffff", "", "r0=0xffff"),
    ("movw r1, #0", "r1=9 nzcv=0100", "r1=0"),
    ("movt r0, #0x2000", "r0=0x1234", "r0=0x20001234"),
    ("movt r0, #0", "r0=0xffffffff", "r0=0xffff"),
    ("movt r0, #1", "", ""),
    ("addw r0, r1, #0xfff", "r1=1", "r0=0x1000"),
    ("addw r0, sp, #4", "nzcv=0000", "r0=0x30000004"),
    ("addw r0, r1, #1", "r0=1", "r0=?"),
    ("subw r0, r1, #1", "r1=0 nzcv=0000", "r0=0xffffffff"),
    ("subw sp, sp, #8", "", "sp=0x2ffffff8"),
    ("subw r0, r1, #0xfff", "r1=0x1000", "r0=1"),
    // bitfields
    ("ubfx r0, r1, #4, #8", "r1=0x12345678", "r0=0x67"),
    ("ubfx r0, r1, #31, #1", "r1=0x80000000", "r0=1"),
    ("ubfx r0, r1, #0, #32", "r1=0xdeadbeef", "r0=0xdeadbeef"),
    ("sbfx r0, r1, #4, #8", "r1=0xf80", "r0=0xfffffff8"),
    ("sbfx r0, r1, #0, #8", "r1=0x7f", "r0=0x7f"),
    ("sbfx r0, r1, #8, #4", "r1=0x700", "r0=7"),
    ("bfi r0, r1, #8, #8", "r0=0xffffffff r1=0x12", "r0=0xffff12ff"),
    ("bfi r0, r1, #0, #4", "r0=0 r1=0xff", "r0=0xf"),
    ("bfi r0, r1, #28, #4", "r0=0x12345678 r1=0xa", "r0=0xa2345678"),
    ("clz r0, r1", "r1=0", "r0=32"),
    ("clz r0, r1", "r1=1", "r0=31"),
    ("clz r0, r1", "r1=0x80000000", "r0=0"),
    ("clz r0, r1", "r1=0x10000", "r0=15"),
];

/// Every mnemonic the executor implements.
pub const MNEMONICS: &[&str] = &[
    "lsl", "lsr", "asr", "ror", "mov", "mvn", "add", "adc", "sub", "sbc", "rsb", "cmp", "cmn", "tst", "teq", "and",
    "orr", "eor", "bic", "mul", "mla", "mls", "udiv", "sdiv", "ldr", "ldrb", "ldrh", "ldrsb", "ldrsh", "str", "strb",
    "strh", "ldrd", "strd", "ldm", "stm", "stmdb", "push", "pop", "b", "bl", "bx", "blx", "cbz", "cbnz", "tbb", "tbh",
    "svc", "bkpt", "udf", "nop", "yield", "wfe", "wfi", "sev", "it", "adr", "sxtb", "sxth", "uxtb", "uxth", "rev",
    "rev16", "revsh", "cpsie", "cpsid", "msr", "mrs", "dsb", "dmb", "isb", "movw", "movt", "addw", "subw", "ubfx",
    "sbfx", "bfi", "clz",
];

#[derive(Debug, Default)]
struct Spec {
    regs: BTreeMap<u8, Option<u32>>,
    nzcv: Option<Flags>,
    mem: BTreeMap<u32, Option<u8>>,
    flow: Option<String>,
    steps: usize,
}

fn reg_index(name: &str) -> Option<u8> {
    match name {
        "sp" => Some(13),
        "lr" => Some(14),
        _ => name.strip_prefix('r')?.parse().ok().filter(|r| *r < 13),
    }
}

fn value(tok: &str, prog: &Program) -> Option<u32> {
    if tok == "?" || tok == "none" {
        return None;
    }
    if let Some(l) = tok.strip_prefix('@') {
        return Some(prog.label(l));
    }
    if let Some(h) = tok.strip_prefix("0x") {
        return Some(u32::from_str_radix(h, 16).unwrap_or_else(|_| panic!("bad hex {tok}")));
    }
    Some(tok.parse::<i64>().unwrap_or_else(|_| panic!("bad number {tok}")) as u32)
}

fn parse_spec(s: &str, prog: &Program) -> Spec {
    let mut spec = Spec { steps: 1, ..Spec::default() };
    for tok in s.split_whitespace() {
        let (k, v) = tok.split_once('=').unwrap_or_else(|| panic!("bad token {tok}"));
        if let Some(r) = reg_index(k) {
            spec.regs.insert(r, value(v, prog));
        } else if k == "nzcv" {
            let bit = |i: usize| match &v[i..i + 1] {
                "0" => Some(false),
                "1" => Some(true),
                _ => None,
            };
            spec.nzcv = Some(Flags { n: bit(0), z: bit(1), c: bit(2), v: bit(3) });
        } else if k == "flow" {
            spec.flow = Some(v.to_string());
        } else if k == "steps" {
            spec.steps = v.parse().unwrap();
        } else if let Some(addr) = k.strip_prefix('[').and_then(|a| a.strip_suffix(']')) {
            let addr = value(addr, prog).unwrap();
            for (i, pair) in v.as_bytes().chunks(2).enumerate() {
                let p = std::str::from_utf8(pair).unwrap();
                let b = if p == "??" { None } else { Some(u8::from_str_radix(p, 16).unwrap()) };
                spec.mem.insert(addr + i as u32, b);
            }
        } else {
            panic!("bad token {tok}");
        }
    }
    spec
}

fn parse_flow(s: &str, prog: &Program) -> Flow {
    let (kind, arg) = s.split_once(':').unwrap_or((s, ""));
    match kind {
        "next" => Flow::Next,
        "trap" => Flow::Trap,
        "indet" => Flow::Indeterminate,
        "jump" => Flow::Jump(value(arg, prog).unwrap()),
        "ind" => Flow::Indirect(value(arg, prog)),
        "svc" => Flow::Svc(value(arg, prog).unwrap() as u8),
        "call" => {
            let (t, r) = arg.split_once('/').unwrap();
            Flow::Call { target: value(t, prog), ret: value(r, prog).unwrap() }
        }
        _ => panic!("bad flow {s}"),
    }
}

pub struct Outcome {
    pub mnemonic: &'static str,
    pub error: Option<String>,
}

pub fn run_case(src: &str, init: &str, expect: &str) -> Outcome {
    let asm = format!("{}\n.balign 4\n.space 64\n", src.replace("; ", "\n").replace(';', "\n"));
    let prog = match assemble(BASE, &asm) {
        Ok(p) => p,
        Err(e) => return Outcome { mnemonic: "", error: Some(format!("does not assemble: {e}")) },
    };
    let mut img = FirmwareImage::from_bytes(prog.bytes.clone()).unwrap();
    img.rebase(BASE).unwrap();
    let insns: Vec<Instruction> = sweep(&prog.bytes, BASE);
    let env = Env::new(&img);

    let init = parse_spec(init, &prog);
    let expect = parse_spec(expect, &prog);
    let mut st = MachineState::new();
    for (r, v) in &init.regs {
        st.set_reg(*r, *v);
    }
    if let Some(f) = init.nzcv {
        st.flags = f;
    }
    st.mem.extend(init.mem.iter().map(|(a, b)| (*a, *b)));
    let before = st.clone();

    let mut pc = prog.labels.get("start").copied().unwrap_or(BASE);
    let mut flow = Flow::Next;
    let mut mnemonic = "";
    for i in 0..init.steps {
        let insn = insns.iter().find(|x| x.address == pc).unwrap_or_else(|| panic!("{src}: no instruction at {pc:#x}"));
        mnemonic = insn.op.name();
        flow = match step(&mut st, insn, &env) {
            Ok(f) => f,
            Err(e) => return Outcome { mnemonic, error: Some(format!("{e}")) },
        };
        if i + 1 < init.steps {
            assert_eq!(flow, Flow::Next, "{src}: intermediate step left straight-line flow");
        }
        pc = insn.end();
    }

    let mut want_regs = before.regs;
    for (r, v) in &expect.regs {
        want_regs[*r as usize] = *v;
    }
    let want_flags = expect.nzcv.unwrap_or(before.flags);
    let mut want_mem = before.mem.clone();
    want_mem.extend(expect.mem.iter().map(|(a, b)| (*a, *b)));
    let want_flow = expect.flow.as_deref().map(|f| parse_flow(f, &prog)).unwrap_or(Flow::Next);

    let mut problems = Vec::new();
    for r in 0..15 {
        if st.regs[r] != want_regs[r] {
            problems.push(format!("r{r} = {:x?}, want {:x?}", st.regs[r], want_regs[r]));
        }
    }
    if st.flags != want_flags {
        problems.push(format!("flags {:?}, want {:?}", st.flags, want_flags));
    }
    if st.mem != want_mem {
        problems.push(format!("memory {:x?}, want {:x?}", st.mem, want_mem));
    }
    if flow != want_flow {
        problems.push(format!("flow {flow:x?}, want {want_flow:x?}"));
    }
    let error = (!problems.is_empty()).then(|| problems.join("; "));
    Outcome { mnemonic, error }
}

/// Results of running every case.
pub struct TableRun {
    pub cases: usize,
    pub failures: Vec<String>,
    /// Mnemonics with fewer than three cases.
    pub thin: Vec<&'static str>,
}

pub fn run_table() -> TableRun {
    let mut per_mnemonic: BTreeMap<&str, usize> = BTreeMap::new();
    let mut failures = Vec::new();
    for (src, init, expect) in CASES {
        let out = run_case(src, init, expect);
        *per_mnemonic.entry(out.mnemonic).or_default() += 1;
        if let Some(e) = out.error {
            failures.push(format!("`{src}` [{init}]: {e}"));
        }
    }
    let thin = MNEMONICS.iter().copied().filter(|m| per_mnemonic.get(m).copied().unwrap_or(0) < 3).collect();
    TableRun { cases: CASES.len(), failures, thin }
}
