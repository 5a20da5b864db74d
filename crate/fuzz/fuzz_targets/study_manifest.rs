#![no_main]

use hg_cli::manifest::Manifest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(src) = std::str::from_utf8(data) else { return };
    if let Ok(m) = Manifest::parse(src) {
        let _ = m.validate(src);
    }
});
