use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use platedpm::dpm::{io, CharacterMixtureSet, CharacterTreeModel, ClassMixture};
use platedpm_ffi::*;

/// One-class model with zero filters: every window scores `bias`.
fn constant_model(dir: &Path, bias: f64) -> CString {
    let mut m = CharacterTreeModel::three_part('7', (4, 8), (4, 4));
    m.bias = bias;
    let set = CharacterMixtureSet {
        alphabet: vec!['7'],
        classes: vec![ClassMixture {
            label: '7',
            components: vec![m],
        }],
        hog: Default::default(),
        pyramid: Default::default(),
        canonical_height: 64,
    };
    let path = dir.join(format!("m{bias}.bin"));
    io::save(&set, &path).unwrap();
    CString::new(path.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let p = pdpm_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn load_recognize_and_inspect() {
    let dir = tempfile::tempdir().unwrap();
    let path = constant_model(dir.path(), 1.0);
    let mut model = ptr::null_mut();
    assert_eq!(
        unsafe { pdpm_model_load(path.as_ptr(), &mut model) },
        PdpmStatus::Ok
    );
    assert_eq!(unsafe { pdpm_model_num_classes(model) }, 1);

    let pixels = vec![0.5f32; 256 * 64];
    let mut reading = ptr::null_mut();
    let s = unsafe { pdpm_recognize_plate(model, pixels.as_ptr(), 256, 64, 1, 0.0, &mut reading) };
    assert_eq!(s, PdpmStatus::Ok);
    let n = unsafe { pdpm_reading_len(reading) };
    assert!(n > 0);
    let text = unsafe { CStr::from_ptr(pdpm_reading_text(reading)) }
        .to_str()
        .unwrap()
        .to_string();
    assert_eq!(text, "7".repeat(n));
    assert!(unsafe { pdpm_reading_valid(reading) });
    let mut c = PdpmCharacter {
        codepoint: 0,
        score: 0.0,
        x: 0.0,
        y: 0.0,
        width: 0.0,
        height: 0.0,
    };
    assert_eq!(
        unsafe { pdpm_reading_char(reading, 0, &mut c) },
        PdpmStatus::Ok
    );
    assert_eq!(char::from_u32(c.codepoint), Some('7'));
    assert!((c.score - 1.0).abs() < 1e-9 && c.width > 0.0);
    assert_eq!(
        unsafe { pdpm_reading_char(reading, n, &mut c) },
        PdpmStatus::OutOfRange
    );
    assert!(last_error().contains(&n.to_string()));
    unsafe { pdpm_reading_free(reading) };

    // the same crop through the file entry point
    let img = platedpm::ImageBuffer::filled(256, 64, 3, 0.5).unwrap();
    let png = dir.path().join("plate.png");
    img.save_png(&png).unwrap();
    let png = CString::new(png.to_str().unwrap()).unwrap();
    let mut from_file = ptr::null_mut();
    assert_eq!(
        unsafe { pdpm_recognize_file(model, png.as_ptr(), 0.0, &mut from_file) },
        PdpmStatus::Ok
    );
    assert_eq!(unsafe { pdpm_reading_len(from_file) }, n);
    unsafe { pdpm_reading_free(from_file) };
    unsafe { pdpm_model_free(model) };
}

#[test]
fn threshold_above_every_score_gives_empty_text() {
    let dir = tempfile::tempdir().unwrap();
    let path = constant_model(dir.path(), -1.0);
    let mut model = ptr::null_mut();
    assert_eq!(
        unsafe { pdpm_model_load(path.as_ptr(), &mut model) },
        PdpmStatus::Ok
    );
    let pixels = vec![0.2f32; 128 * 32 * 3];
    let mut reading = ptr::null_mut();
    let s = unsafe { pdpm_recognize_plate(model, pixels.as_ptr(), 128, 32, 3, 0.0, &mut reading) };
    assert_eq!(s, PdpmStatus::Ok);
    assert_eq!(unsafe { pdpm_reading_len(reading) }, 0);
    assert_eq!(
        unsafe { CStr::from_ptr(pdpm_reading_text(reading)) }.to_bytes(),
        b""
    );
    unsafe { pdpm_reading_free(reading) };
    unsafe { pdpm_model_free(model) };
}

#[test]
fn errors_are_reported_not_raised() {
    let mut model = ptr::null_mut();
    assert_eq!(
        unsafe { pdpm_model_load(ptr::null(), &mut model) },
        PdpmStatus::NullArgument
    );
    assert!(last_error().contains("path"));

    let missing = CString::new("/no/such/model.bin").unwrap();
    assert_eq!(
        unsafe { pdpm_model_load(missing.as_ptr(), &mut model) },
        PdpmStatus::Io
    );
    assert!(model.is_null());

    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.bin");
    std::fs::write(&junk, b"not a model").unwrap();
    let junk = CString::new(junk.to_str().unwrap()).unwrap();
    assert_eq!(
        unsafe { pdpm_model_load(junk.as_ptr(), &mut model) },
        PdpmStatus::ModelFormat
    );

    let path = constant_model(dir.path(), 1.0);
    assert_eq!(
        unsafe { pdpm_model_load(path.as_ptr(), &mut model) },
        PdpmStatus::Ok
    );
    let mut reading = ptr::null_mut();
    let tiny = [0.0f32; 4];
    let s = unsafe { pdpm_recognize_plate(model, tiny.as_ptr(), 2, 2, 1, 0.0, &mut reading) };
    assert_eq!(s, PdpmStatus::Precondition);
    let s = unsafe { pdpm_recognize_plate(model, tiny.as_ptr(), 2, 1, 2, 0.0, &mut reading) };
    assert_eq!(s, PdpmStatus::InvalidArgument);
    let s = unsafe { pdpm_recognize_plate(ptr::null(), tiny.as_ptr(), 2, 2, 1, 0.0, &mut reading) };
    assert_eq!(s, PdpmStatus::NullArgument);
    assert!(reading.is_null());

    // null handles are tolerated by the accessors
    assert_eq!(unsafe { pdpm_reading_len(ptr::null()) }, 0);
    assert!(unsafe { pdpm_reading_text(ptr::null()) }.is_null());
    unsafe { pdpm_reading_free(ptr::null_mut()) };
    unsafe { pdpm_model_free(model) };
    unsafe { pdpm_model_free(ptr::null_mut()) };
}
