#![no_main]

use libfuzzer_sys::fuzz_target;
use tfgrad::scorer::protocol::ScoreRequest;

fuzz_target!(|data: &[u8]| {
    if let Ok(req) = ScoreRequest::decode(data) {
        let bytes = req.encode();
        assert_eq!(ScoreRequest::decode(&bytes).unwrap().encode(), bytes);
    }
});
