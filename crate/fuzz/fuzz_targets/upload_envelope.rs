#![no_main]

use hg_core::payload::UploadEnvelope;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(env) = UploadEnvelope::parse(data) {
        assert!(!env.idempotency_key.is_empty());
        UploadEnvelope::parse(&serde_json::to_vec(&env).unwrap()).expect("reparse");
    }
});
