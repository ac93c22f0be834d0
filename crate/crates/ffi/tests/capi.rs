use std::ffi::{c_char, CStr, CString};
use std::ptr;

use shadowprec_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 512];
    let mut n = 0usize;
    unsafe {
        assert_eq!(sp_last_error_message(buf.as_mut_ptr(), buf.len(), &mut n), SpStatus::Ok);
        CStr::from_ptr(buf.as_ptr()).to_string_lossy().into_owned()
    }
}

#[test]
fn config_roundtrip_and_training() {
    let json = CString::new(r#"{"steps": 12, "model": {"dims": [6, 8, 3]}, "optimizer": {"method": "SOAP", "pf": 3}}"#).unwrap();
    let mut cfg: *mut SpConfig = ptr::null_mut();
    unsafe {
        assert_eq!(sp_config_from_json(json.as_ptr(), &mut cfg), SpStatus::Ok, "{}", last_error());
        assert_eq!(sp_config_set_staleness(cfg, 2), SpStatus::Ok);

        let mut need = 0usize;
        assert_eq!(sp_config_to_json(cfg, ptr::null_mut(), 0, &mut need), SpStatus::BufferTooSmall);
        let mut buf = vec![0 as c_char; need];
        assert_eq!(sp_config_to_json(cfg, buf.as_mut_ptr(), need, &mut need), SpStatus::Ok);
        let text = CStr::from_ptr(buf.as_ptr()).to_str().unwrap();
        assert!(text.contains("\"staleness_S\": 2"), "{text}");

        let mut run: *mut SpRun = ptr::null_mut();
        assert_eq!(sp_run_training(cfg, &mut run), SpStatus::Ok, "{}", last_error());
        let mut steps = 0u64;
        assert_eq!(sp_run_steps(run, &mut steps), SpStatus::Ok);
        assert_eq!(steps, 12);
        let (mut first, mut eval) = (0.0, 0.0);
        assert_eq!(sp_run_loss_at(run, 0, &mut first), SpStatus::Ok);
        assert_eq!(sp_run_final_eval_loss(run, &mut eval), SpStatus::Ok);
        assert!(first.is_finite() && eval.is_finite());
        assert_eq!(sp_run_loss_at(run, 12, &mut first), SpStatus::InvalidArgument);

        let dir = tempfile::tempdir().unwrap();
        let d = CString::new(dir.path().to_str().unwrap()).unwrap();
        assert_eq!(sp_run_write_outputs(run, d.as_ptr()), SpStatus::Ok, "{}", last_error());
        assert!(dir.path().join("loss.csv").is_file());
        assert!(dir.path().join("trace.jsonl").is_file());

        let mut need = 0usize;
        sp_run_summary_json(run, ptr::null_mut(), 0, &mut need);
        let mut buf = vec![0 as c_char; need];
        assert_eq!(sp_run_summary_json(run, buf.as_mut_ptr(), need, ptr::null_mut()), SpStatus::Ok);
        assert!(CStr::from_ptr(buf.as_ptr()).to_str().unwrap().contains("\"steps\":12"));

        sp_run_free(run);
        sp_config_free(cfg);
    }
}

#[test]
fn config_errors_map_to_status() {
    let mut cfg: *mut SpConfig = ptr::null_mut();
    let bad = CString::new(r#"{"steps": "many"}"#).unwrap();
    let invalid = CString::new(r#"{"optimizer": {"pf": 0}}"#).unwrap();
    unsafe {
        assert_eq!(sp_config_from_json(bad.as_ptr(), &mut cfg), SpStatus::ConfigError);
        assert!(last_error().contains("invalid config"));
        assert_eq!(sp_config_from_json(invalid.as_ptr(), &mut cfg), SpStatus::ConfigError);
        assert!(cfg.is_null());
        assert_eq!(sp_config_from_json(ptr::null(), &mut cfg), SpStatus::NullPointer);
        assert_eq!(sp_config_default(ptr::null_mut()), SpStatus::NullPointer);
        assert_eq!(sp_run_steps(ptr::null(), ptr::null_mut()), SpStatus::NullPointer);
        sp_config_free(ptr::null_mut());
        sp_run_free(ptr::null_mut());
        sp_store_free(ptr::null_mut());
    }
}

#[test]
fn inv_root_and_eta() {
    let m = [4.0, 0.0, 0.0, 16.0];
    let mut out = [0.0; 4];
    unsafe {
        assert_eq!(sp_inv_root(m.as_ptr(), 2, 2, 0.0, out.as_mut_ptr()), SpStatus::Ok);
    }
    assert!((out[0] - 0.5).abs() < 1e-12 && (out[3] - 0.25).abs() < 1e-12);
    assert!(out[1].abs() < 1e-12 && out[2].abs() < 1e-12);

    let asym = [1.0, 2.0, 0.0, 1.0];
    let mut eta = 0.0;
    unsafe {
        assert_eq!(sp_inv_root(asym.as_ptr(), 2, 4, 1e-6, out.as_mut_ptr()), SpStatus::InvalidArgument);
        assert_eq!(sp_inv_root(m.as_ptr(), 0, 4, 0.0, out.as_mut_ptr()), SpStatus::InvalidArgument);
        assert_eq!(sp_compute_eta(7.0, 10.0, 1.5, &mut eta), SpStatus::Ok);
        assert_eq!(sp_compute_eta(7.0, 10.0, 0.0, &mut eta), SpStatus::InvalidArgument);
    }
    assert!((eta - 2.0).abs() < 1e-12);
}

#[test]
fn store_put_get_spills_and_reports_tiers() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("cold.bin").to_str().unwrap()).unwrap();
    let mut store: *mut SpStore = ptr::null_mut();
    unsafe {
        assert_eq!(sp_store_new(64, 128, path.as_ptr(), &mut store), SpStatus::Ok, "{}", last_error());
        for block in 0..6u32 {
            let data = vec![block as u8; 48];
            assert_eq!(sp_store_put(store, block, 2, data.as_ptr(), data.len(), SpTier::Hot), SpStatus::Ok, "{}", last_error());
        }
        let (mut hot, mut host) = (0u64, 0u64);
        sp_store_resident_bytes(store, SpTier::Hot, &mut hot);
        sp_store_resident_bytes(store, SpTier::Host, &mut host);
        assert!(hot <= 64 && host <= 128);

        let mut buf = [0u8; 48];
        let (mut n, mut tier) = (0usize, SpTier::Hot);
        assert_eq!(sp_store_get(store, 0, 2, buf.as_mut_ptr(), buf.len(), &mut n, &mut tier), SpStatus::Ok, "{}", last_error());
        assert_eq!(n, 48);
        assert_eq!(buf, [0u8; 48]);
        assert_eq!(tier, SpTier::Host);
        assert_eq!(sp_store_get(store, 5, 2, buf.as_mut_ptr(), 4, &mut n, ptr::null_mut()), SpStatus::BufferTooSmall);
        assert_eq!(n, 48);
        assert_eq!(sp_store_get(store, 9, 2, buf.as_mut_ptr(), 48, &mut n, ptr::null_mut()), SpStatus::NotFound);
        assert_eq!(sp_store_get(store, 0, 8, buf.as_mut_ptr(), 48, &mut n, ptr::null_mut()), SpStatus::InvalidArgument);
        sp_store_free(store);
    }
}

#[test]
fn header_declares_every_entry_point() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/shadowprec.h")).unwrap();
    for f in [
        "sp_last_error_message",
        "sp_config_default",
        "sp_config_from_json",
        "sp_config_to_json",
        "sp_config_set_steps",
        "sp_config_set_staleness",
        "sp_config_set_seed",
        "sp_config_free",
        "sp_run_training",
        "sp_run_steps",
        "sp_run_loss_at",
        "sp_run_final_eval_loss",
        "sp_run_summary_json",
        "sp_run_write_outputs",
        "sp_run_free",
        "sp_inv_root",
        "sp_compute_eta",
        "sp_store_new",
        "sp_store_put",
        "sp_store_get",
        "sp_store_resident_bytes",
        "sp_store_free",
    ] {
        assert!(header.contains(&format!(" {f}(")), "{f} missing from header");
    }
    assert!(header.contains("typedef struct SpStore SpStore;"));
}
