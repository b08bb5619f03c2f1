#![no_main]

use libfuzzer_sys::fuzz_target;
use vitskip::vit::capture::{decode_matrix, encode_matrix};

fuzz_target!(|data: &[u8]| {
    if let Ok(m) = decode_matrix(data) {
        let again = encode_matrix(m.view());
        assert_eq!(decode_matrix(&again).unwrap().dim(), m.dim());
    }
});
