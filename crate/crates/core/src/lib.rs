//! Structure recovery and argument extraction for stripped Cortex-M firmware.

pub mod image;
pub mod isa;
pub mod analyze;
pub mod argdefs;
pub mod coi;
pub mod dataid;
pub mod diag;
pub mod exec;
pub mod funcs;
pub mod listing;
pub mod pack;
pub mod trace;
