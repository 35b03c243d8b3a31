#![no_main]

use imconf::raster::{decode_raster, encode_raster};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(r) = decode_raster(data) {
        let bytes = encode_raster(&r).expect("decoded rasters re-encode");
        assert_eq!(decode_raster(&bytes).expect("roundtrip"), r);
    }
});
