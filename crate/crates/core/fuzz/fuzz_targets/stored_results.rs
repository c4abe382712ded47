#![no_main]

use hte_sieve::harness::{aggregate, StoredResults};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(stored) = StoredResults::from_json(text) {
            let _ = aggregate(&stored.results, &stored.config);
        }
    }
});
