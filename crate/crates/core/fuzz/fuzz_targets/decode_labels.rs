#![no_main]

use libfuzzer_sys::fuzz_target;
use vitskip::vit::capture::{decode_labels, encode_labels};

fuzz_target!(|data: &[u8]| {
    if let Ok(labels) = decode_labels(data) {
        assert_eq!(encode_labels(&labels), data);
    }
});
