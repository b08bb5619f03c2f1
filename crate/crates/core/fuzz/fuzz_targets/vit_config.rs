#![no_main]

use libfuzzer_sys::fuzz_target;
use vitskip::vit::ViTConfig;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(vit) = ViTConfig::from_toml_str(text) {
            assert_eq!(
                ViTConfig::from_toml_str(&vit.to_toml_string()).unwrap(),
                vit
            );
        }
    }
});
