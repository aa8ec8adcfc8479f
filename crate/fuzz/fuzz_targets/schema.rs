#![no_main]

use libfuzzer_sys::fuzz_target;
use rankdfm::features::FeatureSchema;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(schema) = FeatureSchema::from_json(text) {
        let json = schema.to_json();
        let again = FeatureSchema::from_json(&json).expect("written schema reads back");
        assert_eq!(again.to_json(), json);
    }
});
