#![no_main]

use hg_analytics::tug::{FEATURE_COUNT, TugModel};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(model) = TugModel::from_json(data) else { return };
    let again = TugModel::from_json(model.to_json().as_bytes()).expect("roundtrip");
    let x = [0.5; FEATURE_COUNT];
    let (a, b) = (model.raw_predict_array(&x), again.raw_predict_array(&x));
    assert!(a == b || (a.is_nan() && b.is_nan()));
});
