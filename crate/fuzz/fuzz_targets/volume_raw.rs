#![no_main]

use libfuzzer_sys::fuzz_target;
use tfgrad::volume::{Dtype, ScalarField, VolumeMeta};

// First four bytes pick a small shape and the dtype; the rest is payload.
fuzz_target!(|data: &[u8]| {
    if data.len() < 4 {
        return;
    }
    let dims = [data[0] as usize % 9, data[1] as usize % 9, data[2] as usize % 9];
    let dtype = match data[3] % 3 {
        0 => Dtype::Uint8,
        1 => Dtype::Uint16,
        _ => Dtype::Float32,
    };
    let meta = VolumeMeta::new(dims, dtype);
    if let Ok(field) = ScalarField::from_raw_bytes(&data[4..], &meta) {
        assert_eq!(field.values().len(), dims.iter().product::<usize>());
        assert!(field.values().iter().all(|v| v.is_finite()));
    }
});
