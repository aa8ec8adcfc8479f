#![no_main]

use libfuzzer_sys::fuzz_target;
use rankdfm::model::ModelArtifact;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(model) = ModelArtifact::from_json(text) {
        let json = model.to_json();
        let again = ModelArtifact::from_json(&json).expect("written model reads back");
        assert_eq!(again, model);
    }
});
