#![no_main]

use hg_analytics::tug::{AccelerometerTrace, TugConfig, detect_steps};
use hg_core::payload::AccelDocument;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(doc) = AccelDocument::parse(data) else { return };
    AccelDocument::parse(&serde_json::to_vec(&doc).unwrap()).expect("reparse");
    let trace = AccelerometerTrace::from(doc);
    if let Ok(episodes) = detect_steps(&trace, &TugConfig::default()) {
        for ep in episodes {
            assert!(ep.step_indices.windows(2).all(|w| w[0] < w[1]));
            assert!(ep.end_index < trace.samples.len());
        }
    }
});
