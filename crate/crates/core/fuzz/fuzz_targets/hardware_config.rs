#![no_main]

use libfuzzer_sys::fuzz_target;
use vitskip::sim::HardwareConfig;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(hw) = HardwareConfig::from_toml_str(text) {
            assert_eq!(
                HardwareConfig::from_toml_str(&hw.to_toml_string()).unwrap(),
                hw
            );
        }
    }
});
