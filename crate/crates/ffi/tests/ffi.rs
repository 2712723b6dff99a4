use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use apdnn::data::{synth_dataset, SynthKind};
use apdnn::engine::PackedModel;
use apdnn::nn::{default_bits, init_model, mlp};
use apdnn::train::{train, TrainConfig};
use apdnn::Precision;
use apdnn_ffi::*;

fn trained_packed() -> PackedModel {
    let arch = mlp(6, 16, 2, default_bits());
    let mut model = init_model(&arch, 4).unwrap();
    let data = synth_dataset(SynthKind::TwoGaussians, 256, 6, 4).unwrap();
    let cfg = TrainConfig::new(default_bits(), 2, 32, 4);
    train(&mut model, &data, None, &cfg).unwrap();
    PackedModel::from_model(&model).unwrap()
}

fn last_error() -> String {
    let p = apdnn_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn handle_lifecycle_matches_engine() {
    let packed = trained_packed();
    let bytes = packed.to_bytes();
    let mut h: *mut ApdnnModel = ptr::null_mut();
    unsafe {
        assert_eq!(
            apdnn_model_from_bytes(bytes.as_ptr(), bytes.len(), &mut h),
            ApdnnStatus::Ok
        );
        assert_eq!(apdnn_model_bits(h), 8);
        assert_eq!(apdnn_model_num_classes(h), 2);
        let mut shape = [0usize; 3];
        assert_eq!(
            apdnn_model_input_shape(h, shape.as_mut_ptr()),
            ApdnnStatus::Ok
        );
        assert_eq!(shape, [1, 1, 6]);

        let mut bits = [0u8; 8];
        let mut count = 0usize;
        assert_eq!(
            apdnn_model_available_bits(h, bits.as_mut_ptr(), 8, &mut count),
            ApdnnStatus::Ok
        );
        assert_eq!(&bits[..count], &[1, 2, 4, 8, 32]);
        assert_eq!(
            apdnn_model_available_bits(h, bits.as_mut_ptr(), 2, &mut count),
            ApdnnStatus::BufferTooSmall
        );
        assert_eq!(count, 5);

        let x = synth_dataset(SynthKind::TwoGaussians, 5, 6, 9)
            .unwrap()
            .images;
        for b in [1u8, 2, 4, 8] {
            assert_eq!(apdnn_model_set_bits(h, b), ApdnnStatus::Ok);
            let mut logits = [0f32; 10];
            let st = apdnn_model_infer(h, x.data().as_ptr(), x.len(), 5, logits.as_mut_ptr(), 10);
            assert_eq!(st, ApdnnStatus::Ok);
            let want = packed
                .runtime(Precision::Int(b))
                .unwrap()
                .infer(&x)
                .unwrap();
            assert_eq!(&logits[..], want.data());
        }
        apdnn_model_free(h);
    }
}

#[test]
fn errors_are_reported() {
    let packed = trained_packed();
    let bytes = packed.to_bytes();
    let mut h: *mut ApdnnModel = ptr::null_mut();
    unsafe {
        assert_eq!(
            apdnn_model_from_bytes(bytes.as_ptr(), 10, &mut h),
            ApdnnStatus::Format
        );
        assert!(last_error().contains("offset"));
        assert_eq!(
            apdnn_model_from_bytes(ptr::null(), 0, &mut h),
            ApdnnStatus::NullPointer
        );

        let missing = CString::new("/nonexistent/model.apdnn").unwrap();
        assert_eq!(apdnn_model_load(missing.as_ptr(), &mut h), ApdnnStatus::Io);

        assert_eq!(
            apdnn_model_from_bytes(bytes.as_ptr(), bytes.len(), &mut h),
            ApdnnStatus::Ok
        );
        assert_eq!(
            apdnn_model_set_bits(h, 3),
            ApdnnStatus::PrecisionUnavailable
        );
        assert_eq!(apdnn_model_bits(h), 8);
        assert_eq!(apdnn_model_set_bits(h, 32), ApdnnStatus::Usage);
        assert_eq!(apdnn_model_set_bits(h, 9), ApdnnStatus::InvalidInput);

        let x = [0.5f32; 6];
        let mut logits = [0f32; 2];
        assert_eq!(
            apdnn_model_infer(h, x.as_ptr(), 5, 1, logits.as_mut_ptr(), 2),
            ApdnnStatus::Dimension
        );
        assert_eq!(
            apdnn_model_infer(h, x.as_ptr(), 6, 1, logits.as_mut_ptr(), 1),
            ApdnnStatus::BufferTooSmall
        );
        assert_eq!(
            apdnn_model_infer(ptr::null(), x.as_ptr(), 6, 1, logits.as_mut_ptr(), 2),
            ApdnnStatus::NullPointer
        );
        apdnn_model_free(h);
        apdnn_model_free(ptr::null_mut());
    }
}

fn target_dir() -> PathBuf {
    // tests run from target/<profile>/deps
    let exe = std::env::current_exe().unwrap();
    exe.parent().unwrap().parent().unwrap().to_path_buf()
}

#[test]
fn c_program_links_against_header() {
    let lib = target_dir().join("libapdnn_ffi.a");
    if !lib.exists() || Command::new("cc").arg("--version").output().is_err() {
        eprintln!(
            "skipping: no C compiler or static library at {}",
            lib.display()
        );
        return;
    }
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let tmp = tempfile::tempdir().unwrap();
    let exe = tmp.path().join("smoke");
    let status = Command::new("cc")
        .arg(manifest.join("tests/c/smoke.c"))
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success(), "C smoke test failed to compile");

    let packed = trained_packed();
    let model_path = tmp.path().join("m.apdnn");
    packed.save(&model_path).unwrap();
    let out = Command::new(&exe)
        .arg(&model_path)
        .arg("4")
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let got: Vec<f32> = String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(|l| l.parse().unwrap())
        .collect();
    let x = apdnn::Tensor::new(vec![1, 1, 1, 6], vec![0.5; 6]).unwrap();
    let want = packed
        .runtime(Precision::Int(4))
        .unwrap()
        .infer(&x)
        .unwrap();
    assert_eq!(got, want.data());
}
