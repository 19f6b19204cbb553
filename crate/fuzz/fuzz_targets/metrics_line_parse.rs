#![no_main]

use cltune_core::trainer::MetricsRecord;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|line: &str| {
    if let Ok(record) = MetricsRecord::parse_line(line) {
        let _ = MetricsRecord::parse_line(&record.to_line()).expect("serialized record parses");
    }
});
