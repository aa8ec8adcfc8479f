#![no_main]

use libfuzzer_sys::fuzz_target;
use rankdfm::datagen::Corpus;

fuzz_target!(|data: &[u8]| {
    // Anything accepted must survive a write/read cycle unchanged.
    if let Ok(corpus) = Corpus::read_jsonl(data) {
        let bytes = corpus.to_jsonl_bytes();
        let again = Corpus::read_jsonl(&bytes[..]).expect("written corpus reads back");
        assert_eq!(again.to_jsonl_bytes(), bytes);
    }
});
