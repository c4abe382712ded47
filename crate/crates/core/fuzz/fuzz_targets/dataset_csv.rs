#![no_main]

use hte_sieve::dgp::ObservedDataset;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ds) = ObservedDataset::read_csv(data) {
        assert_eq!(ds.n0() + ds.n1(), ds.n());
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        let back = ObservedDataset::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.n(), ds.n());
    }
});
