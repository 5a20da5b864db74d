#![no_main]

use hg_analytics::phq8::score_document;
use hg_core::payload::Phq8Document;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(doc) = Phq8Document::parse(data) else { return };
    let answers = doc.answers();
    assert!(answers.iter().all(|&a| a <= 3));
    let again = Phq8Document::parse(&serde_json::to_vec(&doc).unwrap()).expect("roundtrip");
    assert_eq!(doc, again);
    let (_, scored) = score_document(data).expect("parsed documents score");
    assert_eq!(scored.total_score as u32, answers.iter().map(|&a| a as u32).sum::<u32>());
});
