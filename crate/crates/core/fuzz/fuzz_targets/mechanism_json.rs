#![no_main]

use hte_sieve::basis::AffineMap;
use hte_sieve::mechanism::{reexpress, MechanismParams};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(params) = serde_json::from_slice::<MechanismParams>(data) {
        let map = AffineMap::from_interval(-3.0, 3.0).unwrap();
        let _ = reexpress(&params, &map, &map);
    }
});
