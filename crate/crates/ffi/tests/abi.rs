use std::ffi::{CStr, CString};
use std::ptr;

use flowgest::encode::{encode_flow, flow_to_polar};
use flowgest::flow::{estimate_flow_planes, FarnebackParams, FlowField};
use flowgest::net::checkpoint::{save_checkpoint, Checkpoint};
use flowgest::net::{NetConfig, ResNet};
use flowgest::raster::Plane;
use flowgest::synth::gen_texture_f32;
use flowgest_ffi::*;

fn last_error() -> String {
    let p = fg_last_error();
    assert!(!p.is_null(), "expected an error message");
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn shifted(tex: &Plane<u8>, w: usize, h: usize, dx: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            out.push(tex.get(x + 8 - dx, y + 8));
        }
    }
    out
}

#[test]
fn version_is_crate_version() {
    let v = unsafe { CStr::from_ptr(fg_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn flow_matches_library_and_recovers_translation() {
    let (w, h) = (96, 80);
    let tex = gen_texture_f32(w + 16, h + 16, 3).to_u8();
    let (a, b) = (shifted(&tex, w, h, 0), shifted(&tex, w, h, 2));
    let (mut u, mut v) = (vec![0f32; w * h], vec![0f32; w * h]);
    let params = fg_flow_params_default();
    let status = unsafe { fg_flow_estimate(a.as_ptr(), b.as_ptr(), w, h, &params, u.as_mut_ptr(), v.as_mut_ptr()) };
    assert_eq!(status, FgStatus::Ok);
    assert!(fg_last_error().is_null());
    let direct = estimate_flow_planes(
        &Plane::from_vec(w, h, a.clone()).to_f32(),
        &Plane::from_vec(w, h, b.clone()).to_f32(),
        &FarnebackParams::default(),
    )
    .unwrap();
    assert_eq!(direct.u, u);
    assert_eq!(direct.v, v);
    let field = FlowField { width: w, height: h, u, v };
    assert!(field.mean_endpoint_error(&FlowField::constant(w, h, 2.0, 0.0), 16) < 0.5);

    // null params select the defaults
    let (mut u2, mut v2) = (vec![0f32; w * h], vec![0f32; w * h]);
    let status = unsafe { fg_flow_estimate(a.as_ptr(), b.as_ptr(), w, h, ptr::null(), u2.as_mut_ptr(), v2.as_mut_ptr()) };
    assert_eq!(status, FgStatus::Ok);
    assert_eq!(u2, field.u);
}

#[test]
fn flow_rejects_bad_arguments() {
    let mut out = vec![0f32; 4];
    let mut out2 = vec![0f32; 4];
    let img = [0u8; 4];
    let status = unsafe { fg_flow_estimate(ptr::null(), img.as_ptr(), 2, 2, ptr::null(), out.as_mut_ptr(), out2.as_mut_ptr()) };
    assert_eq!(status, FgStatus::NullPointer);
    assert!(last_error().contains("prev"));
    let status = unsafe { fg_flow_estimate(img.as_ptr(), img.as_ptr(), 0, 2, ptr::null(), out.as_mut_ptr(), out2.as_mut_ptr()) };
    assert_eq!(status, FgStatus::InvalidArgument);
    let mut params = fg_flow_params_default();
    params.poly_n = 4;
    let status = unsafe { fg_flow_estimate(img.as_ptr(), img.as_ptr(), 2, 2, &params, out.as_mut_ptr(), out2.as_mut_ptr()) };
    assert_eq!(status, FgStatus::InvalidArgument);
    assert!(last_error().contains("poly_n"), "{}", last_error());
}

#[test]
fn quantize_matches_library() {
    let n = 500;
    let u: Vec<f32> = (0..n).map(|k| ((k as f32) * 0.37).sin() * 25.0).collect();
    let v: Vec<f32> = (0..n).map(|k| ((k as f32) * 0.91).cos() * 25.0).collect();
    let (mut mag, mut dir) = (vec![0u8; n], vec![0u8; n]);
    let status = unsafe { fg_quantize(u.as_ptr(), v.as_ptr(), n, 20.0, mag.as_mut_ptr(), dir.as_mut_ptr()) };
    assert_eq!(status, FgStatus::Ok);
    let field = FlowField { width: n, height: 1, u: u.clone(), v: v.clone() };
    let (m, d) = encode_flow(&field, 20.0).unwrap();
    assert_eq!(m.plane.data, mag);
    assert_eq!(d.plane.data, dir);
    assert_eq!(flow_to_polar(&field).magnitude.len(), n);
    let status = unsafe { fg_quantize(u.as_ptr(), v.as_ptr(), n, 0.0, mag.as_mut_ptr(), dir.as_mut_ptr()) };
    assert_eq!(status, FgStatus::InvalidArgument);
}

#[test]
fn cross_modality_replicates_channel_mean() {
    let rgb: Vec<f32> = (0..2 * 3 * 3 * 3).map(|k| k as f32 * 0.5 - 3.0).collect();
    let mut out = vec![0f32; 2 * 20 * 9];
    let status = unsafe { fg_cross_modality_init(rgb.as_ptr(), 2, 3, 3, 20, out.as_mut_ptr()) };
    assert_eq!(status, FgStatus::Ok);
    for o in 0..2 {
        for pos in 0..9 {
            let mean = ((0..3).map(|c| rgb[(o * 3 + c) * 9 + pos] as f64).sum::<f64>() / 3.0) as f32;
            for c in 0..20 {
                assert_eq!(out[(o * 20 + c) * 9 + pos], mean);
            }
        }
    }
    let status = unsafe { fg_cross_modality_init(rgb.as_ptr(), 0, 3, 3, 20, out.as_mut_ptr()) };
    assert_eq!(status, FgStatus::InvalidArgument);
}

#[test]
fn model_round_trip_through_handle() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let mut net = ResNet::<f32>::new(NetConfig::default(), 11).unwrap();
    save_checkpoint(&path, &Checkpoint::from_model(&mut net, 0)).unwrap();

    let cpath = CString::new(path.to_str().unwrap()).unwrap();
    let mut model: *mut FgModel = ptr::null_mut();
    assert_eq!(unsafe { fg_model_load(cpath.as_ptr(), &mut model) }, FgStatus::Ok);
    assert!(!model.is_null());
    let classes = unsafe { fg_model_num_classes(model) };
    let channels = unsafe { fg_model_input_channels(model) };
    assert_eq!((classes, channels), (15, 20));

    let (h, w) = (64, 64);
    let chunk: Vec<f32> = (0..channels * h * w).map(|k| ((k as f32) * 0.013).sin() * 0.5 + 0.5).collect();
    let mut probs = vec![0f64; classes];
    let status = unsafe { fg_model_predict(model, chunk.as_ptr(), h, w, probs.as_mut_ptr()) };
    assert_eq!(status, FgStatus::Ok);
    let expect = net.predict_chunk(&chunk, h, w).unwrap();
    assert_eq!(probs, expect);
    assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    unsafe { fg_model_free(model) };
    unsafe { fg_model_free(ptr::null_mut()) };
    assert_eq!(unsafe { fg_model_num_classes(ptr::null()) }, 0);
}

#[test]
fn model_load_errors() {
    let missing = CString::new("/nonexistent/model.ckpt").unwrap();
    let mut model: *mut FgModel = ptr::null_mut();
    assert_eq!(unsafe { fg_model_load(missing.as_ptr(), &mut model) }, FgStatus::Io);
    assert!(model.is_null());
    assert!(!last_error().is_empty());

    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let junk = CString::new(junk.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { fg_model_load(junk.as_ptr(), &mut model) }, FgStatus::Format);
    assert_eq!(unsafe { fg_model_load(ptr::null(), &mut model) }, FgStatus::NullPointer);
}

#[test]
fn vote_ties_and_errors() {
    let mut probs = vec![0f64; 2 * 15];
    probs[4] = 1.0;
    probs[15 + 9] = 1.0;
    let mut label = 99u32;
    assert_eq!(unsafe { fg_vote(probs.as_ptr(), 2, 15, &mut label) }, FgStatus::Ok);
    assert_eq!(label, 4);
    assert_eq!(unsafe { fg_vote(probs.as_ptr(), 3, 10, &mut label) }, FgStatus::InvalidArgument);
    assert_eq!(unsafe { fg_vote(probs.as_ptr(), 0, 15, &mut label) }, FgStatus::InvalidArgument);
    assert!(last_error().contains("no chunk"));
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/flowgest.h")).unwrap();
    for name in [
        "FLOWGEST_H",
        "typedef struct FgModel FgModel",
        "FgFlowParams",
        "FG_STATUS_OK",
        "fg_flow_estimate",
        "fg_quantize",
        "fg_cross_modality_init",
        "fg_model_load",
        "fg_model_predict",
        "fg_model_free",
        "fg_vote",
        "fg_last_error",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
}
