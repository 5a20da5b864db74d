#![no_main]

use hg_core::payload::pose_from_csv;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Some((&fps, rest)) = data.split_first() else { return };
    let Ok(text) = std::str::from_utf8(rest) else { return };
    if let Ok(doc) = pose_from_csv(text, fps as f64) {
        assert!(!doc.frames.is_empty());
        assert!(doc.frames.iter().all(|f| f.keypoints.len() == 2));
    }
});
