#![no_main]

use std::path::Path;

use layoutforge::manifest::RunManifest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(m) = RunManifest::parse(text, Path::new("/nonexistent")) {
            let _ = m.subject_set();
            let _ = m.guidance_config();
            let _ = m.gradcheck_settings();
        }
    }
});
