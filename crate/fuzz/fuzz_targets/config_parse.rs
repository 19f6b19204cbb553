#![no_main]

use cltune_core::harness::ExperimentConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|text: &str| {
    if let Ok(config) = ExperimentConfig::parse(text) {
        let _ = config.digest();
    }
});
