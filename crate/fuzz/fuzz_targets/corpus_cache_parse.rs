#![no_main]

use cltune_core::corpus::{parse_corpus_cache, write_corpus_cache};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|text: &str| {
    if let Ok((header, stream)) = parse_corpus_cache(text, 64) {
        let again = parse_corpus_cache(&write_corpus_cache(&header, &stream), 64).expect("written cache parses");
        assert_eq!(again, (header, stream));
    }
});
