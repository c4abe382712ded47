#![no_main]

use hte_sieve::series::SeriesModel;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(model) = serde_json::from_slice::<SeriesModel>(data) {
        if model.gamma.len() == model.basis.len() {
            let _ = model.phi(0.0, 0.0);
        }
    }
});
