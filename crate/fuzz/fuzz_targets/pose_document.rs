#![no_main]

use hg_analytics::sts::{StsConfig, analyze_pose};
use hg_core::payload::PoseDocument;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(doc) = PoseDocument::parse(data) else { return };
    PoseDocument::parse(&serde_json::to_vec(&doc).unwrap()).expect("reparse");
    if let Ok(r) = analyze_pose(&doc, &StsConfig::default(), None) {
        assert!(r.total_cycles <= r.transitions.len());
        assert_eq!(r.total_hesitations, r.transitions.iter().map(|t| t.hesitation_count).sum::<usize>());
    }
});
