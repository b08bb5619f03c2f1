#![no_main]

use libfuzzer_sys::fuzz_target;
use vitskip::pathfinder::EffortCatalog;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(catalog) = EffortCatalog::parse(text) {
            assert_eq!(EffortCatalog::parse(&catalog.to_text()).unwrap(), catalog);
        }
    }
});
