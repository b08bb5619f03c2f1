#![no_main]

use libfuzzer_sys::fuzz_target;
use vitskip::similarity::CkaMatrix;

// First byte picks the encoder count.
fuzz_target!(|data: &[u8]| {
    let Some((&d, body)) = data.split_first() else {
        return;
    };
    if let Ok(m) = CkaMatrix::read_csv(body, (d % 16) as usize) {
        let again = CkaMatrix::read_csv(m.to_csv_string().as_bytes(), m.num_encoders()).unwrap();
        assert_eq!(again, m);
    }
});
