use std::ffi::{c_char, CStr, CString};
use std::ptr;

use tpg::cli::Bundle;
use tpg::data::{CheckIn, Dataset};
use tpg::geocode::{quadkey_of, GeoPoint};
use tpg::model::{ModelConfig, Predictor, Tpg};
use tpg_ffi::*;

fn last_error() -> String {
    let p = tpg_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn quadkey_matches_core_and_checks_buffers() {
    let mut buf = [0 as c_char; 32];
    let status = unsafe { tpg_quadkey_of(40.7128, -74.006, 12, buf.as_mut_ptr(), buf.len()) };
    assert_eq!(status, TpgStatus::Ok);
    assert!(tpg_last_error().is_null());
    let got = unsafe { CStr::from_ptr(buf.as_ptr()) }.to_str().unwrap();
    let want = quadkey_of(GeoPoint::new(40.7128, -74.006).unwrap(), 12).unwrap();
    assert_eq!(got, want.as_str());

    let mut small = [0 as c_char; 12];
    let status = unsafe { tpg_quadkey_of(40.7128, -74.006, 12, small.as_mut_ptr(), small.len()) };
    assert_eq!(status, TpgStatus::BufferTooSmall);
    assert!(last_error().contains("13"));
    let status = unsafe { tpg_quadkey_of(95.0, 0.0, 12, buf.as_mut_ptr(), buf.len()) };
    assert_eq!(status, TpgStatus::InvalidArgument);
    let status = unsafe { tpg_quadkey_of(0.0, 0.0, 12, ptr::null_mut(), 0) };
    assert_eq!(status, TpgStatus::InvalidArgument);
}

#[test]
fn scalar_helpers() {
    assert_eq!(tpg_time_slot(1_704_067_200 + 13 * 3600), 13);
    assert_eq!(tpg_time_slot(0), 72);
    assert!((tpg_haversine_km(0.0, 0.0, 0.0, 1.0) - 111.195).abs() < 0.01);
    assert!(tpg_haversine_km(91.0, 0.0, 0.0, 0.0).is_nan());
}

#[test]
fn metrics_and_undefined_cases() {
    let ranks = [1usize, 3, 7, 20];
    let (mut recall, mut ndcg) = (0.0, 0.0);
    unsafe {
        assert_eq!(tpg_recall_at_k(ranks.as_ptr(), 4, 5, &mut recall), TpgStatus::Ok);
        assert_eq!(tpg_ndcg_at_k(ranks.as_ptr(), 4, 5, &mut ndcg), TpgStatus::Ok);
        assert_eq!(tpg_recall_at_k(ptr::null(), 0, 5, &mut recall), TpgStatus::Numeric);
        assert_eq!(tpg_ndcg_at_k(ranks.as_ptr(), 4, 0, &mut ndcg), TpgStatus::InvalidArgument);
    }
    assert_eq!(recall, 0.5);
    assert!((ndcg - (1.0 + 0.5) / 4.0).abs() < 1e-12);
}

fn saved_model(dir: &std::path::Path) -> (Tpg, tpg::numcore::ParamStore, Dataset) {
    let pois: Vec<GeoPoint> = (0..6)
        .map(|i| GeoPoint::new(48.85 + 0.01 * i as f64, 2.35 + 0.007 * i as f64).unwrap())
        .collect();
    let ds = Dataset {
        user_ids: vec!["alice".into(), "bob".into()],
        poi_ids: (0..6).map(|i| format!("v{i}")).collect(),
        pois,
        sequences: vec![Vec::new(), Vec::new()],
        malformed: 0,
    };
    let cfg = ModelConfig {
        poi_dim: 8,
        geo_dim: 8,
        time_dim: 16,
        model_dim: 16,
        level: 14,
        init_scale: 0.5,
        ..ModelConfig::default()
    };
    let (model, store) = Tpg::new(&cfg, &ds.pois, 2, 21).unwrap();
    Bundle::from_dataset(&cfg, &ds).save(dir, &store).unwrap();
    (model, store, ds)
}

#[test]
fn model_handle_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (model, store, _) = saved_model(dir.path());
    let path = CString::new(dir.path().to_str().unwrap()).unwrap();
    let mut handle: *mut TpgModel = ptr::null_mut();
    unsafe {
        assert_eq!(tpg_model_load(path.as_ptr(), &mut handle), TpgStatus::Ok);
        assert_eq!(tpg_model_num_pois(handle), 6);
        assert_eq!(tpg_model_num_users(handle), 2);

        let (mut user, mut poi) = (usize::MAX, usize::MAX);
        let bob = CString::new("bob").unwrap();
        let v4 = CString::new("v4").unwrap();
        assert_eq!(tpg_model_user_index(handle, bob.as_ptr(), &mut user), TpgStatus::Ok);
        assert_eq!(tpg_model_poi_index(handle, v4.as_ptr(), &mut poi), TpgStatus::Ok);
        assert_eq!((user, poi), (1, 4));
        let mut buf = [0 as c_char; 8];
        assert_eq!(tpg_model_poi_id(handle, 2, buf.as_mut_ptr(), buf.len()), TpgStatus::Ok);
        assert_eq!(CStr::from_ptr(buf.as_ptr()).to_str().unwrap(), "v2");
        assert_eq!(tpg_model_poi_id(handle, 6, buf.as_mut_ptr(), buf.len()), TpgStatus::InvalidArgument);
        let nobody = CString::new("carol").unwrap();
        assert_eq!(tpg_model_user_index(handle, nobody.as_ptr(), &mut user), TpgStatus::InvalidArgument);
        assert!(last_error().contains("carol"));

        let hist_pois = [0usize, 3, 4];
        let hist_times = [1_704_100_000i64, 1_704_110_000, 1_704_120_000];
        let prompt = 1_704_130_000;
        let mut out_pois = [0usize; 4];
        let mut out_scores = [0f64; 4];
        let mut len = 0usize;
        let status = tpg_model_predict(
            handle,
            1,
            hist_pois.as_ptr(),
            hist_times.as_ptr(),
            3,
            prompt,
            4,
            out_pois.as_mut_ptr(),
            out_scores.as_mut_ptr(),
            &mut len,
        );
        assert_eq!(status, TpgStatus::Ok, "{}", last_error());
        assert_eq!(len, 4);

        let history: Vec<CheckIn> = hist_pois
            .iter()
            .zip(&hist_times)
            .map(|(&poi, &time)| CheckIn { user: 1, time, poi })
            .collect();
        let want = Predictor::new(&model, &store).unwrap().top_k(1, &history, &[prompt], 4).unwrap();
        let got: Vec<(usize, f64)> = out_pois.iter().copied().zip(out_scores).collect();
        assert_eq!(got, want[0]);

        let bad = [9usize];
        let status = tpg_model_predict(
            handle, 1, bad.as_ptr(), hist_times.as_ptr(), 1, prompt, 4,
            out_pois.as_mut_ptr(), out_scores.as_mut_ptr(), &mut len,
        );
        assert_eq!(status, TpgStatus::InvalidArgument);
        tpg_model_free(handle);
        tpg_model_free(ptr::null_mut());
    }
}

#[test]
fn missing_checkpoint_is_reported() {
    let path = CString::new("/nonexistent/checkpoint").unwrap();
    let mut handle: *mut TpgModel = ptr::null_mut();
    let status = unsafe { tpg_model_load(path.as_ptr(), &mut handle) };
    assert_eq!(status, TpgStatus::Checkpoint);
    assert!(handle.is_null());
    assert!(last_error().contains("model.cfg"));
}

#[test]
fn header_compiles_as_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/tpg.h");
    let src = format!("#include \"{header}\"\nint main(void) {{ return tpg_time_slot(0) == 72 ? 0 : 1; }}\n");
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("probe.c");
    std::fs::write(&file, src).unwrap();
    let Ok(out) = std::process::Command::new("cc").arg("-std=c99").arg("-fsyntax-only").arg(&file).output() else {
        eprintln!("no C compiler; skipping header check");
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
