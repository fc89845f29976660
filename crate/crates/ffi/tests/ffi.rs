use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use poisoncert_ffi::*;

const CONFIG: &str = r#"
[dataset]
source = "halfmoons"
n_train = 12
n_test = 8
seed = 1
batch_size = 4
epochs = 2

[train]
lr = 0.5
loss = "hinge"
init = { kind = "seeded", hidden = [], seed = 2 }

[threat]
kind = "bounded"
budget = 2
label_flip = true

[objective]
kind = "test_error"
"#;

fn config() -> *mut PcConfig {
    let text = CString::new(CONFIG).unwrap();
    let mut cfg = ptr::null_mut();
    assert_eq!(unsafe { pc_config_from_toml(text.as_ptr(), &mut cfg) }, PcStatus::Ok);
    assert!(!cfg.is_null());
    cfg
}

fn last_error() -> String {
    let p = pc_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn certify_through_the_c_abi() {
    let cfg = config();
    unsafe {
        assert_eq!(pc_config_set_deterministic(cfg, true), PcStatus::Ok);
        let mut cert = ptr::null_mut();
        assert_eq!(pc_certify(cfg, &mut cert), PcStatus::Ok);
        let mut s = std::mem::zeroed::<PcSummary>();
        assert_eq!(pc_certificate_summary(cert, &mut s), PcStatus::Ok);
        assert_eq!(s.status, PcCertStatus::Optimal);
        assert!(s.primal <= s.bound);
        assert!(s.poisoned <= 2);

        let mut len = 0usize;
        let st = pc_certificate_poisoned(cert, ptr::null_mut(), 0, &mut len);
        assert_eq!(len, s.poisoned);
        assert_eq!(st, if len == 0 { PcStatus::Ok } else { PcStatus::BufferTooSmall });
        let mut buf = vec![usize::MAX; len];
        assert_eq!(pc_certificate_poisoned(cert, buf.as_mut_ptr(), len, &mut len), PcStatus::Ok);
        assert!(buf.iter().all(|&i| i < 12));

        let mut json = ptr::null_mut();
        assert_eq!(pc_certificate_to_json(cert, &mut json), PcStatus::Ok);
        let v: serde_json::Value = serde_json::from_str(CStr::from_ptr(json).to_str().unwrap()).unwrap();
        assert_eq!(v["status"], "optimal");
        assert_eq!(v["primal"].as_f64().unwrap(), s.primal);
        pc_string_free(json);
        pc_certificate_free(cert);
        pc_config_free(cfg);
    }
}

#[test]
fn attack_and_export() {
    let cfg = config();
    unsafe {
        let mut cert = ptr::null_mut();
        assert_eq!(pc_attack(cfg, &mut cert), PcStatus::Ok);
        pc_certificate_free(cert);
        let mut text = ptr::null_mut();
        assert_eq!(pc_export(cfg, &mut text), PcStatus::Ok);
        let model = CStr::from_ptr(text).to_str().unwrap();
        assert!(model.starts_with("\\ poisoncert model\n"));
        assert!(model.trim_end().ends_with("End"));
        pc_string_free(text);
        pc_config_free(cfg);
    }
}

#[test]
fn errors_map_to_status_codes() {
    unsafe {
        let mut cfg = ptr::null_mut();
        assert_eq!(pc_config_from_toml(ptr::null(), &mut cfg), PcStatus::NullArgument);
        let bad = CString::new("[dataset").unwrap();
        assert_eq!(pc_config_from_toml(bad.as_ptr(), &mut cfg), PcStatus::Config);
        assert!(last_error().contains("config error"));
        let json = CString::new("{}").unwrap();
        assert_eq!(pc_config_from_json(json.as_ptr(), &mut cfg), PcStatus::Config);

        // budget larger than the training set is caught when the run starts
        let text = CString::new(CONFIG.replace("budget = 2", "budget = 50")).unwrap();
        assert_eq!(pc_config_from_toml(text.as_ptr(), &mut cfg), PcStatus::Ok);
        let mut cert = ptr::null_mut();
        assert_eq!(pc_certify(cfg, &mut cert), PcStatus::Config);
        assert!(cert.is_null());
        assert!(last_error().contains("budget"));
        pc_config_free(cfg);

        assert_eq!(pc_certify(ptr::null(), &mut cert), PcStatus::NullArgument);
        pc_config_free(ptr::null_mut());
        pc_certificate_free(ptr::null_mut());
        pc_string_free(ptr::null_mut());
    }
    let v = unsafe { CStr::from_ptr(pc_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include/poisoncert.h")).unwrap();
    for f in [
        "pc_last_error",
        "pc_version",
        "pc_config_from_toml",
        "pc_config_from_json",
        "pc_config_free",
        "pc_config_set_time_limit",
        "pc_config_set_deterministic",
        "pc_certify",
        "pc_attack",
        "pc_certificate_free",
        "pc_certificate_summary",
        "pc_certificate_poisoned",
        "pc_certificate_to_json",
        "pc_export",
        "pc_string_free",
    ] {
        assert!(header.contains(&format!("{f}(")), "{f} missing from the header");
    }
    assert!(header.contains("typedef struct PcConfig PcConfig;"));
}

/// Compiles a C program against the header and the static library, when a
/// C compiler is available.
#[test]
fn c_program_links_and_runs() {
    let Ok(exe) = std::env::current_exe() else { return };
    // target/<profile>/deps/<test> -> target/<profile>
    let lib_dir = exe.parent().and_then(|p| p.parent()).unwrap().to_path_buf();
    let lib = lib_dir.join("libpoisoncert_ffi.a");
    if !lib.exists() || Command::new("cc").arg("--version").output().is_err() {
        eprintln!("skipping: no C compiler or static library");
        return;
    }
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let dir = tempfile::tempdir().unwrap();
    let bin = dir.path().join("smoke");
    let status = Command::new("cc")
        .arg(root.join("tests/c/smoke.c"))
        .arg("-I")
        .arg(root.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .unwrap();
    assert!(status.success());
    let out = Command::new(&bin).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("status 0 "), "{text}");
}
