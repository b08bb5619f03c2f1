#![no_main]

use libfuzzer_sys::fuzz_target;
use vitskip::vit::LogitBatch;

// First 4 bytes: little-endian length of the logits part; the rest are labels.
fuzz_target!(|data: &[u8]| {
    if data.len() < 4 {
        return;
    }
    let split = u32::from_le_bytes(data[..4].try_into().unwrap()) as usize;
    let body = &data[4..];
    let split = split.min(body.len());
    if let Ok(batch) = LogitBatch::from_bytes(&body[..split], &body[split..]) {
        for row in batch.probs().rows() {
            assert!((row.sum() - 1.0).abs() < 1e-9);
        }
        let _ = batch.accuracy();
    }
});
