#![no_main]

use cltune_core::checkpoint::Artifact;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(artifact) = Artifact::decode(data) {
        // Payloads may hold NaN, so compare encodings rather than values.
        let bytes = artifact.encode().expect("decoded artifact re-encodes");
        let again = Artifact::decode(&bytes).expect("re-encoded artifact decodes");
        assert_eq!(again.encode().expect("re-encodes"), bytes);
    }
});
