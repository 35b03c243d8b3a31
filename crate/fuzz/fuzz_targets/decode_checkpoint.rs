#![no_main]

use imconf::propensity::{decode_checkpoint, encode_checkpoint};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(m) = decode_checkpoint(data) {
        let bytes = encode_checkpoint(&m).expect("decoded models re-encode");
        assert_eq!(decode_checkpoint(&bytes).expect("roundtrip"), m);
    }
});
