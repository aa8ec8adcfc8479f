#![no_main]

use libfuzzer_sys::fuzz_target;
use rankdfm::features::FeaturizedCorpus;

fuzz_target!(|data: &[u8]| {
    if let Ok(corpus) = FeaturizedCorpus::read_jsonl(data) {
        let mut bytes = Vec::new();
        corpus.write_jsonl(&mut bytes).unwrap();
        let again = FeaturizedCorpus::read_jsonl(&bytes[..]).expect("written corpus reads back");
        let mut second = Vec::new();
        again.write_jsonl(&mut second).unwrap();
        assert_eq!(second, bytes);
    }
});
