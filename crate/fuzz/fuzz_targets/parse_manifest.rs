#![no_main]

use imconf::manifest::{parse_manifest, write_manifest};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(rows) = parse_manifest(data) {
        let mut buf = Vec::new();
        write_manifest(&rows, &mut buf).expect("parsed rows serialize");
        let _ = parse_manifest(&buf);
    }
});
