mod common;

use std::process::Command;

use common::*;
use thumbscope_cli::{analyze_corpus, collect_inputs, Outcome};
use thumbscope_fixtures::firmware;

fn thumbscope() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_thumbscope"));
    for (k, _) in std::env::vars().filter(|(k, _)| k.starts_with("THUMBSCOPE_")) {
        c.env_remove(k);
    }
    c
}

#[test]
fn corpus_produces_one_report_per_file() {
    let (inp, out) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let files = write_corpus(inp.path());
    let inputs = collect_inputs(&[inp.path().to_path_buf()]).unwrap();
    assert_eq!(inputs, files);
    let r = analyze_corpus(&inputs, &nordic(), &run_config(out.path(), 4)).unwrap();
    assert_eq!(r.summary.failed, 0, "{:?}", r.files);
    assert_eq!(r.summary.reports(), files.len());
    assert_eq!(r.summary.timeout, 0);
    assert_eq!(read_reports(out.path()).len(), files.len());
    for f in &r.files {
        let Outcome::Report { sha256, .. } = &f.outcome else { panic!("{f:?}") };
        assert!(out.path().join(format!("{sha256}.json")).is_file());
    }
    assert_eq!(r.exit_code(), 0);
}

#[test]
fn one_corrupt_file_fails_alone() {
    let (inp, out) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let files = write_corpus(inp.path());
    let whole = std::fs::read(&files[0]).unwrap();
    std::fs::write(inp.path().join("truncated.bin"), &whole[..20]).unwrap();
    let inputs = collect_inputs(&[inp.path().to_path_buf()]).unwrap();
    let r = analyze_corpus(&inputs, &nordic(), &run_config(out.path(), 3)).unwrap();
    assert_eq!(r.summary.failed, 1);
    assert_eq!(r.summary.reports(), files.len());
    let bad = r.files.iter().find(|f| f.path.ends_with("truncated.bin")).unwrap();
    assert!(matches!(bad.outcome, Outcome::Failed { .. }), "{bad:?}");
    assert_eq!(r.exit_code(), 0);
}

#[test]
fn identical_inputs_are_analysed_once() {
    let (inp, out) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let f = firmware::passkey_fixture("123456");
    for name in ["a.bin", "b.bin", "c.bin"] {
        std::fs::write(inp.path().join(name), f.bytes()).unwrap();
    }
    let inputs = collect_inputs(&[inp.path().to_path_buf()]).unwrap();
    let r = analyze_corpus(&inputs, &nordic(), &run_config(out.path(), 2)).unwrap();
    assert_eq!((r.summary.reports(), r.summary.duplicates), (1, 2));
    assert_eq!(r.files.len(), 1);
    assert!(r.files[0].path.ends_with("a.bin"));
}

#[test]
fn non_bin_files_are_ignored_in_directories() {
    let inp = tempfile::tempdir().unwrap();
    std::fs::write(inp.path().join("notes.txt"), b"hello").unwrap();
    std::fs::create_dir(inp.path().join("sub")).unwrap();
    std::fs::write(inp.path().join("sub/fw.BIN"), [0u8; 64]).unwrap();
    assert_eq!(collect_inputs(&[inp.path().to_path_buf()]).unwrap(), vec![inp.path().join("sub/fw.BIN")]);
    assert!(collect_inputs(&[inp.path().join("missing")]).is_err());
}

#[test]
fn empty_directory_exits_nonzero() {
    let (inp, out) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let o = thumbscope()
        .arg(inp.path())
        .args(["--pack".as_ref(), pack_dir("nordic").as_os_str()])
        .args(["--out".as_ref(), out.path().as_os_str()])
        .output()
        .unwrap();
    assert!(!o.status.success());
    let summary: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(summary, serde_json::json!({"ok": 0, "partial": 0, "failed": 0, "timeout": 0, "duplicates": 0}));
    assert!(String::from_utf8_lossy(&o.stderr).contains("no input binaries"));
}

#[test]
fn binary_writes_the_passkey_report() {
    let (inp, out) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let f = firmware::passkey_fixture("123456");
    let path = inp.path().join("fw.bin");
    std::fs::write(&path, f.bytes()).unwrap();
    let o = thumbscope()
        .arg(&path)
        .args(["--pack".as_ref(), pack_dir("nordic").as_os_str()])
        .args(["--out".as_ref(), out.path().as_os_str()])
        .args(["--workers", "1", "--trace-time-limit", "30s", "--dump-structure"])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let sha = thumbscope::analyze::sha256_hex(f.bytes());
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(out.path().join(format!("{sha}.json"))).unwrap()).unwrap();
    let opt = report["cois"].as_array().unwrap().iter().find(|c| c["coi"] == "sd_ble_opt_set").unwrap();
    assert_eq!(opt["args"]["p_opt"]["target"]["target"]["text"], "123456");
    let structure: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.path().join(format!("{sha}.structure.json"))).unwrap()).unwrap();
    assert_eq!(structure["code_base"], "0x1b000");
}

#[test]
fn environment_mirrors_flags() {
    let (inp, out) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let f = firmware::passkey_fixture("000000");
    std::fs::write(inp.path().join("fw.bin"), f.bytes()).unwrap();
    let o = thumbscope()
        .arg(inp.path())
        .env("THUMBSCOPE_PACK", pack_dir("nordic"))
        .env("THUMBSCOPE_OUT", out.path())
        .env("THUMBSCOPE_CODE_BASE", "0x1b000")
        .env("THUMBSCOPE_MODE", "svc")
        .env("THUMBSCOPE_WORKERS", "2")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(read_reports(out.path()).len(), 1);

    let o = thumbscope().arg(inp.path()).env("THUMBSCOPE_PACK", pack_dir("nordic")).env("THUMBSCOPE_WORKERS", "0").output().unwrap();
    assert!(!o.status.success());
    let o = thumbscope().arg(inp.path()).env("THUMBSCOPE_PACK", pack_dir("nordic")).env("THUMBSCOPE_MODE", "thumb").output().unwrap();
    assert!(!o.status.success());
}

#[test]
fn function_mode_from_the_command_line() {
    let (inp, out) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let s = thumbscope_fixtures::compiled::sample("m0-os");
    std::fs::write(inp.path().join("m0.bin"), &s.image).unwrap();
    let o = thumbscope()
        .arg(inp.path())
        .args(["--mode", "function", "--max-call-depth", "1"])
        .args(["--pack".as_ref(), pack_dir("common").as_os_str()])
        .args(["--out".as_ref(), out.path().as_os_str()])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let (_, bytes) = read_reports(out.path()).pop().unwrap();
    let report: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
    assert_eq!(report["mode"], "function");
    assert!(report["cois"].as_array().unwrap().iter().all(|c| c["coi"] == "memset"));
    assert!(!report["cois"].as_array().unwrap().is_empty());
}
