#![no_main]

use libfuzzer_sys::fuzz_target;
use rankdfm::pairs::{read_pairs_jsonl, write_pairs_jsonl};

fuzz_target!(|data: &[u8]| {
    if let Ok((header, pairs)) = read_pairs_jsonl(data) {
        assert!(pairs.iter().all(|p| p.r_p > p.r_n && p.pos_item_id != p.neg_item_id));
        let mut bytes = Vec::new();
        write_pairs_jsonl(&mut bytes, &header.config, &header.corpus_hash, &pairs).unwrap();
        let (h2, p2) = read_pairs_jsonl(&bytes[..]).expect("written pairs read back");
        assert_eq!(h2, header);
        assert_eq!(p2, pairs);
    }
});
